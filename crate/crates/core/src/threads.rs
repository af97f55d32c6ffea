//! Threads and their durable message history. Posting a message is what
//! publishes `thread.message`, the spawn signal the orchestrator consumes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::clock::{Clock, Millis};
use crate::events::{BusError, EventBus, TOPIC_THREAD_MESSAGE};
use crate::store::{Store, StoreError};

const THREAD_PREFIX: &str = "thread/";
const MESSAGE_PREFIX: &str = "message/";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thread {
    pub thread_id: String,
    pub agent_id: String,
    /// Principal that created the thread, e.g. `user:alice`.
    pub creator: String,
    pub created_ts: Millis,
    pub message_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: String,
    pub thread_id: String,
    pub seq: u64,
    /// `user:<name>` or `agent:<agent_id>`.
    pub author: String,
    pub text: String,
    pub ts: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<String>,
}

#[derive(Debug, Error)]
pub enum ThreadError {
    #[error("thread not found: {0}")]
    NotFound(String),
    #[error("invalid message: {0}")]
    Invalid(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

pub struct Threads {
    store: Arc<Store>,
    bus: Arc<EventBus>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Threads {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Threads").finish_non_exhaustive()
    }
}

impl Threads {
    pub fn new(store: Arc<Store>, bus: Arc<EventBus>, clock: Arc<dyn Clock>) -> Self {
        Self { store, bus, clock }
    }

    pub fn create_thread(&self, agent_id: &str, creator: &str) -> Result<Thread, ThreadError> {
        let thread = Thread {
            thread_id: format!("t-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]),
            agent_id: agent_id.to_string(),
            creator: creator.to_string(),
            created_ts: self.clock.now_ms(),
            message_count: 0,
        };
        self.store
            .put_json(&thread_key(&thread.thread_id), &thread, Some(0))?;
        Ok(thread)
    }

    pub fn get(&self, thread_id: &str) -> Result<Thread, ThreadError> {
        self.store
            .get_json::<Thread>(&thread_key(thread_id))?
            .map(|(t, _)| t)
            .ok_or_else(|| ThreadError::NotFound(thread_id.to_string()))
    }

    pub fn list(&self) -> Result<Vec<Thread>, ThreadError> {
        Ok(self
            .store
            .scan_json::<Thread>(THREAD_PREFIX)?
            .into_iter()
            .map(|(_, t, _)| t)
            .collect())
    }

    /// Appends a message and publishes it. The sequence number comes from a
    /// compare-and-set on the thread record, so concurrent posters never
    /// share one.
    pub fn post_message(
        &self,
        thread_id: &str,
        author: &str,
        text: &str,
        in_reply_to: Option<&str>,
    ) -> Result<Message, ThreadError> {
        if text.is_empty() {
            return Err(ThreadError::Invalid("text must be non-empty".into()));
        }
        let key = thread_key(thread_id);
        let (thread, seq) = loop {
            let Some((mut thread, version)) = self.store.get_json::<Thread>(&key)? else {
                return Err(ThreadError::NotFound(thread_id.to_string()));
            };
            thread.message_count += 1;
            match self.store.put_json(&key, &thread, Some(version)) {
                Ok(_) => {
                    let seq = thread.message_count;
                    break (thread, seq);
                }
                Err(e) if e.is_conflict() => continue,
                Err(e) => return Err(e.into()),
            }
        };
        let message = Message {
            message_id: format!("m-{}-{seq:06}", thread_id),
            thread_id: thread_id.to_string(),
            seq,
            author: author.to_string(),
            text: text.to_string(),
            ts: self.clock.now_ms(),
            in_reply_to: in_reply_to.map(str::to_string),
        };
        self.store
            .put_json(&message_key(thread_id, seq), &message, Some(0))?;
        self.bus.publish(
            TOPIC_THREAD_MESSAGE,
            json!({
                "thread_id": thread_id,
                "agent_id": thread.agent_id,
                "message_id": message.message_id,
                "seq": seq,
                "author": author,
                "text": text,
                "ts": message.ts,
                "in_reply_to": message.in_reply_to,
            }),
        )?;
        Ok(message)
    }

    /// Messages with `seq > after`, oldest first.
    pub fn messages(&self, thread_id: &str, after: u64) -> Result<Vec<Message>, ThreadError> {
        self.get(thread_id)?;
        Ok(self
            .store
            .scan_json::<Message>(&format!("{MESSAGE_PREFIX}{thread_id}/"))?
            .into_iter()
            .map(|(_, m, _)| m)
            .filter(|m| m.seq > after)
            .collect())
    }

    /// The last `n` messages, oldest first.
    pub fn recent(&self, thread_id: &str, n: usize) -> Result<Vec<Message>, ThreadError> {
        let mut all = self.messages(thread_id, 0)?;
        let skip = all.len().saturating_sub(n);
        Ok(all.split_off(skip))
    }
}

fn thread_key(id: &str) -> String {
    format!("{THREAD_PREFIX}{id}")
}

fn message_key(thread_id: &str, seq: u64) -> String {
    format!("{MESSAGE_PREFIX}{thread_id}/{seq:010}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn threads() -> (Threads, Arc<EventBus>) {
        let store = Arc::new(Store::in_memory());
        let clock = ManualClock::new(0);
        let bus = EventBus::open(store.clone(), clock.clone(), 5_000).unwrap();
        (Threads::new(store, bus.clone(), clock), bus)
    }

    #[test]
    fn post_assigns_sequence_and_publishes() {
        let (th, bus) = threads();
        let sub = bus.subscribe(TOPIC_THREAD_MESSAGE, "t");
        let t = th.create_thread("a", "user:alice").unwrap();
        let m1 = th.post_message(&t.thread_id, "user:alice", "hi", None).unwrap();
        let m2 = th
            .post_message(&t.thread_id, "agent:a", "hello", Some(&m1.message_id))
            .unwrap();
        assert_eq!((m1.seq, m2.seq), (1, 2));
        let d = sub.try_recv().unwrap();
        assert_eq!(d.event.payload["text"], "hi");
        assert_eq!(d.event.payload["agent_id"], "a");
        assert_eq!(th.messages(&t.thread_id, 1).unwrap(), vec![m2.clone()]);
        assert_eq!(th.recent(&t.thread_id, 1).unwrap(), vec![m2]);
        assert_eq!(th.get(&t.thread_id).unwrap().message_count, 2);
    }

    #[test]
    fn unknown_thread() {
        let (th, _) = threads();
        assert!(matches!(
            th.post_message("nope", "user:x", "hi", None),
            Err(ThreadError::NotFound(_))
        ));
        assert!(matches!(th.messages("nope", 0), Err(ThreadError::NotFound(_))));
    }
}
