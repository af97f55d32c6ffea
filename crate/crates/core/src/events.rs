//! In-process pub/sub bus with consumer groups and at-least-once delivery.
//!
//! Every published event is written to the store before `publish` returns.
//! Each `(topic, group)` pair keeps a committed cursor (first unacked offset);
//! within a group an event is handed to one member at a time and handed out
//! again once its redelivery deadline passes without an ack. Consumers must
//! be idempotent and dedup on [`Event::id`].

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::{Clock, Millis};
use crate::store::{Store, StoreError};

pub const TOPIC_THREAD_MESSAGE: &str = "thread.message";
pub const TOPIC_INSTANCE_STATE: &str = "instance.state";
pub const TOPIC_IDENTITY_CHANGE: &str = "identity.change";
pub const TOPIC_CONFIG_APPLIED: &str = "config.applied";

pub const TOPICS: [&str; 4] = [
    TOPIC_THREAD_MESSAGE,
    TOPIC_INSTANCE_STATE,
    TOPIC_IDENTITY_CHANGE,
    TOPIC_CONFIG_APPLIED,
];

pub const DEFAULT_REDELIVERY_MS: Millis = 5_000;

const EVENT_PREFIX: &str = "event/";
const GROUP_PREFIX: &str = "evgroup/";
const SEQ_KEY: &str = "sys/event-seq";
const SEQ_BLOCK: u64 = 1_000;
/// Upper bound on one condvar wait so virtual-clock deadlines are noticed.
const POLL_SLICE: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: String,
    pub topic: String,
    pub payload: Value,
    pub ts: Millis,
}

#[derive(Debug, Error)]
pub enum BusError {
    #[error("topic must be non-empty")]
    EmptyTopic,
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("event payload must be a JSON object")]
    PayloadNotObject,
    #[error(transparent)]
    Storage(#[from] StoreError),
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredEvent {
    offset: u64,
    event: Event,
}

struct InFlight {
    deadline: Millis,
    event_id: String,
}

#[derive(Default)]
struct Group {
    durable: bool,
    /// First offset not yet acknowledged.
    cursor: u64,
    /// Next offset that has never been handed out.
    next: u64,
    acked: BTreeSet<u64>,
    in_flight: HashMap<u64, InFlight>,
    attempts: HashMap<u64, u32>,
}

#[derive(Default)]
struct TopicLog {
    start: u64,
    events: VecDeque<Event>,
    groups: HashMap<String, Group>,
}

impl TopicLog {
    fn end(&self) -> u64 {
        self.start + self.events.len() as u64
    }

    fn get(&self, offset: u64) -> Option<&Event> {
        offset
            .checked_sub(self.start)
            .and_then(|i| self.events.get(i as usize))
    }
}

struct BusState {
    next_seq: u64,
    seq_reserved: u64,
    topics: HashMap<String, TopicLog>,
}

pub struct EventBus {
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    redelivery_ms: Millis,
    state: Mutex<BusState>,
    cond: Condvar,
    members: AtomicU64,
}

impl std::fmt::Debug for EventBus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventBus")
            .field("redelivery_ms", &self.redelivery_ms)
            .finish_non_exhaustive()
    }
}

/// One delivery attempt of an event to a subscriber.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub event: Event,
    pub attempt: u32,
}

impl EventBus {
    pub fn open(
        store: Arc<Store>,
        clock: Arc<dyn Clock>,
        redelivery_ms: Millis,
    ) -> Result<Arc<Self>, BusError> {
        let mut topics: HashMap<String, TopicLog> = HashMap::new();
        let mut max_seq = 0u64;

        let mut stored: Vec<StoredEvent> = store
            .scan_json::<StoredEvent>(EVENT_PREFIX)?
            .into_iter()
            .map(|(_, ev, _)| ev)
            .collect();
        stored.sort_by_key(|s| (s.event.topic.clone(), s.offset));
        for s in stored {
            if let Some(n) = s.event.id.strip_prefix("ev-").and_then(|n| n.parse().ok()) {
                max_seq = max_seq.max(n);
            }
            let log = topics.entry(s.event.topic.clone()).or_default();
            if log.events.is_empty() {
                log.start = s.offset;
            }
            log.events.push_back(s.event);
        }

        for (key, cursor, _) in store.scan_json::<u64>(GROUP_PREFIX)? {
            let rest = &key[GROUP_PREFIX.len()..];
            let Some((topic, group)) = rest.split_once('/') else {
                continue;
            };
            let log = topics.entry(topic.to_string()).or_default();
            if log.events.is_empty() && log.start < cursor {
                log.start = cursor;
            }
            log.groups.insert(
                group.to_string(),
                Group {
                    durable: true,
                    cursor,
                    next: cursor,
                    ..Group::default()
                },
            );
        }
        for log in topics.values_mut() {
            let start = log.start;
            for g in log.groups.values_mut() {
                g.cursor = g.cursor.max(start);
                g.next = g.cursor;
            }
        }

        let reserved = store.get_json::<u64>(SEQ_KEY)?.map_or(0, |(v, _)| v);
        let next_seq = reserved.max(max_seq) + 1;
        Ok(Arc::new(Self {
            store,
            clock,
            redelivery_ms,
            state: Mutex::new(BusState {
                next_seq,
                seq_reserved: next_seq - 1,
                topics,
            }),
            cond: Condvar::new(),
            members: AtomicU64::new(0),
        }))
    }

    pub fn redelivery_ms(&self) -> Millis {
        self.redelivery_ms
    }

    /// Durably enqueues an event and wakes subscribers. Returns the event id.
    pub fn publish(&self, topic: &str, payload: Value) -> Result<String, BusError> {
        if topic.is_empty() {
            return Err(BusError::EmptyTopic);
        }
        if !TOPICS.contains(&topic) {
            return Err(BusError::UnknownTopic(topic.to_string()));
        }
        if !payload.is_object() {
            return Err(BusError::PayloadNotObject);
        }
        let mut st = self.state.lock();
        if st.next_seq > st.seq_reserved {
            let reserve = st.next_seq + SEQ_BLOCK - 1;
            self.store.put_json(SEQ_KEY, &reserve, None)?;
            st.seq_reserved = reserve;
        }
        let seq = st.next_seq;
        let event = Event {
            id: format!("ev-{seq:06}"),
            topic: topic.to_string(),
            payload,
            ts: self.clock.now_ms(),
        };
        let log = st.topics.entry(topic.to_string()).or_default();
        if log.groups.is_empty() {
            // nobody to deliver to
            st.next_seq += 1;
            return Ok(event.id);
        }
        let offset = log.end();
        self.store.put_json(
            &event_key(topic, offset),
            &StoredEvent {
                offset,
                event: event.clone(),
            },
            None,
        )?;
        log.events.push_back(event);
        st.next_seq += 1;
        drop(st);
        self.cond.notify_all();
        Ok(format!("ev-{seq:06}"))
    }

    /// Joins `group` on `topic`. A durable group remembers its cursor in the
    /// store, so a member that crashes and resubscribes resumes from the
    /// first unacknowledged event. A brand-new group starts at the tail.
    pub fn subscribe(self: &Arc<Self>, topic: &str, group: &str) -> Subscription {
        self.join(topic, group, true)
    }

    /// A private, non-durable group that disappears when the subscription is
    /// dropped (live feeds).
    pub fn subscribe_ephemeral(self: &Arc<Self>, topic: &str) -> Subscription {
        let id = self.members.fetch_add(1, Ordering::SeqCst);
        self.join(topic, &format!("~ephemeral-{id}"), false)
    }

    fn join(self: &Arc<Self>, topic: &str, group: &str, durable: bool) -> Subscription {
        let mut st = self.state.lock();
        let log = st.topics.entry(topic.to_string()).or_default();
        let end = log.end();
        if !log.groups.contains_key(group) {
            log.groups.insert(
                group.to_string(),
                Group {
                    durable,
                    cursor: end,
                    next: end,
                    ..Group::default()
                },
            );
            if durable {
                if let Err(e) = self.store.put_json(&group_key(topic, group), &end, None) {
                    tracing::warn!(topic, group, error = %e, "could not persist group cursor");
                }
            }
        }
        Subscription {
            bus: Arc::clone(self),
            topic: topic.to_string(),
            group: group.to_string(),
            durable,
        }
    }

    /// Retained events for a topic, oldest first.
    pub fn retained(&self, topic: &str) -> Vec<Event> {
        let st = self.state.lock();
        st.topics
            .get(topic)
            .map(|l| l.events.iter().cloned().collect())
            .unwrap_or_default()
    }

    fn poll(&self, topic: &str, group: &str) -> Option<Delivery> {
        let now = self.clock.now_ms();
        let mut st = self.state.lock();
        let log = st.topics.get_mut(topic)?;
        let end = log.end();
        let start = log.start;
        let redelivery = self.redelivery_ms;
        let g = log.groups.get_mut(group)?;

        let expired = g
            .in_flight
            .iter()
            .filter(|(_, f)| f.deadline <= now)
            .map(|(o, _)| *o)
            .min();
        let offset = match expired {
            Some(o) => o,
            None if g.next < end => {
                let o = g.next.max(start);
                g.next = o + 1;
                o
            }
            None => return None,
        };
        let event = log.get(offset)?.clone();
        let g = log.groups.get_mut(group)?;
        g.in_flight.insert(
            offset,
            InFlight {
                deadline: now + redelivery,
                event_id: event.id.clone(),
            },
        );
        let attempt = g.attempts.entry(offset).or_insert(0);
        *attempt += 1;
        Some(Delivery {
            event,
            attempt: *attempt,
        })
    }

    fn ack(&self, topic: &str, group: &str, event_id: &str) -> Result<bool, BusError> {
        let mut st = self.state.lock();
        let Some(log) = st.topics.get_mut(topic) else {
            return Ok(false);
        };
        let Some(g) = log.groups.get_mut(group) else {
            return Ok(false);
        };
        let Some(offset) = g
            .in_flight
            .iter()
            .find(|(_, f)| f.event_id == event_id)
            .map(|(o, _)| *o)
        else {
            return Ok(false);
        };
        g.in_flight.remove(&offset);
        g.attempts.remove(&offset);
        g.acked.insert(offset);
        let before = g.cursor;
        while g.acked.remove(&g.cursor) {
            g.cursor += 1;
        }
        if g.cursor != before && g.durable {
            self.store
                .put_json(&group_key(topic, group), &g.cursor, None)?;
        }
        self.trim(topic, log)?;
        Ok(true)
    }

    /// Drops events every group has moved past, in memory and in the store.
    fn trim(&self, topic: &str, log: &mut TopicLog) -> Result<(), BusError> {
        let Some(floor) = log.groups.values().map(|g| g.cursor).min() else {
            return Ok(());
        };
        while log.start < floor && !log.events.is_empty() {
            log.events.pop_front();
            let key = event_key(topic, log.start);
            let version = self.store.version(&key);
            if version > 0 {
                self.store.delete(&key, version)?;
            }
            log.start += 1;
        }
        Ok(())
    }

    fn leave(&self, topic: &str, group: &str) {
        let mut st = self.state.lock();
        if let Some(log) = st.topics.get_mut(topic) {
            log.groups.remove(group);
        }
    }
}

fn event_key(topic: &str, offset: u64) -> String {
    format!("{EVENT_PREFIX}{topic}/{offset:020}")
}

fn group_key(topic: &str, group: &str) -> String {
    format!("{GROUP_PREFIX}{topic}/{group}")
}

/// A member of a consumer group.
pub struct Subscription {
    bus: Arc<EventBus>,
    topic: String,
    group: String,
    durable: bool,
}

impl std::fmt::Debug for Subscription {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Subscription")
            .field("topic", &self.topic)
            .field("group", &self.group)
            .finish()
    }
}

impl Subscription {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn try_recv(&self) -> Option<Delivery> {
        self.bus.poll(&self.topic, &self.group)
    }

    /// Blocks up to `timeout` (real time) for the next deliverable event.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Delivery> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(d) = self.try_recv() {
                return Some(d);
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            let wait = (deadline - now).min(POLL_SLICE);
            let mut st = self.bus.state.lock();
            self.bus.cond.wait_for(&mut st, wait);
        }
    }

    /// Acknowledges an event, ending its redelivery. Returns false when the
    /// event is not currently in flight for this group.
    pub fn ack(&self, event_id: &str) -> Result<bool, BusError> {
        self.bus.ack(&self.topic, &self.group, event_id)
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if !self.durable {
            self.bus.leave(&self.topic, &self.group);
        }
    }
}
