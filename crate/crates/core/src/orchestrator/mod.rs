//! Reconciliation core: one live instance per (agent, thread), spawned on
//! message signals and reclaimed when keep-alives stop.

mod service;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::{Clock, Millis};
use crate::events::{BusError, Event, EventBus, TOPIC_INSTANCE_STATE, TOPIC_THREAD_MESSAGE};
use crate::identity::{IdentityClass, IdentityError, IdentityProvider};
use crate::registry::{Registry, ResolvedHarness};
use crate::runner::{
    ContainerLaunch, Runner, RunnerError, VolumeMount, WorkloadHandle, WorkloadSpec,
};
use crate::store::{Store, StoreError};
use crate::threads::{ThreadError, Threads};

pub use service::{OrchestratorService, ServiceConfig};

const INSTANCE_PREFIX: &str = "instance/";
const LIVE_PREFIX: &str = "live/";
const PROCESSED_PREFIX: &str = "orch/processed/";

pub const PROCESSED_RETENTION: usize = 10_000;
pub const RECENT_MESSAGES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstanceState {
    Provisioning,
    Running,
    Stopping,
    Stopped,
    Failed,
}

impl InstanceState {
    pub fn is_live(self) -> bool {
        matches!(self, Self::Provisioning | Self::Running | Self::Stopping)
    }

    pub fn can_become(self, next: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (self, next),
            (Provisioning, Running)
                | (Running, Stopping)
                | (Stopping, Stopped)
                | (Provisioning, Failed)
                | (Running, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: String,
    pub agent_id: String,
    pub thread_id: String,
    pub definition_revision: u64,
    pub state: InstanceState,
    pub identity_id: Option<String>,
    pub workload_id: Option<String>,
    pub last_active_ts: Millis,
    pub created_ts: Millis,
    /// Pinned from the harness at spawn.
    pub idle_timeout_s: u64,
    pub keepalive_interval_s: u64,
    /// Messages accepted while Provisioning, flushed on Running.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pending: Vec<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Instance {
    pub fn idle_for(&self, now: Millis) -> Millis {
        now.saturating_sub(self.last_active_ts)
    }

    pub fn is_idle(&self, now: Millis) -> bool {
        self.idle_for(now) > self.idle_timeout_s * 1000
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconcileOutcome {
    pub event_id: String,
    pub instance_id: Option<String>,
    pub spawned: bool,
    pub forwarded: bool,
    pub queued: bool,
    /// The event id was already processed.
    pub noop: bool,
    /// The message was the serving agent's own reply.
    pub ignored: bool,
    /// Earlier instance that had to be failed or finished first.
    pub replaced: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RecoveryAction {
    /// Workload with no live instance record.
    Stop { workload_id: String },
    /// Live record with no workload behind it.
    Fail { instance_id: String },
    /// Stopping record: the interrupted stop was completed.
    FinishStop { instance_id: String },
    DeleteIdentity { identity_id: String },
    DropIndex { agent_id: String, thread_id: String },
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("instance {instance_id} is {state:?}")]
    WrongState {
        instance_id: String,
        state: InstanceState,
    },
    #[error("spawn of {instance_id} failed: {reason}")]
    SpawnFailed { instance_id: String, reason: String },
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("runner unavailable: {0}")]
    RunnerUnavailable(RunnerError),
    #[error(transparent)]
    Runner(RunnerError),
    #[error(transparent)]
    Thread(#[from] ThreadError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

pub struct Orchestrator {
    store: Arc<Store>,
    bus: Arc<EventBus>,
    clock: Arc<dyn Clock>,
    registry: Arc<Registry>,
    identity: Arc<IdentityProvider>,
    runner: Arc<dyn Runner>,
    threads: Arc<Threads>,
    thread_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    processed: Mutex<VecDeque<(u64, String)>>,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator").finish_non_exhaustive()
    }
}

fn instance_key(id: &str) -> String {
    format!("{INSTANCE_PREFIX}{id}")
}

fn live_key(agent_id: &str, thread_id: &str) -> String {
    format!("{LIVE_PREFIX}{agent_id}/{thread_id}")
}

/// Every instance record, live or not, by id.
pub fn load_instances(store: &Store) -> Result<Vec<Instance>, StoreError> {
    Ok(store
        .scan_json::<Instance>(INSTANCE_PREFIX)?
        .into_iter()
        .map(|(_, i, _)| i)
        .collect())
}

/// Runner volume name for a declared volume. Scoped per (agent, thread) so
/// every thread keeps its own workspace.
pub fn volume_name(agent_id: &str, thread_id: &str, volume: &str) -> String {
    format!("{agent_id}/{thread_id}/{volume}")
}

impl Orchestrator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: Arc<Store>,
        bus: Arc<EventBus>,
        clock: Arc<dyn Clock>,
        registry: Arc<Registry>,
        identity: Arc<IdentityProvider>,
        runner: Arc<dyn Runner>,
        threads: Arc<Threads>,
    ) -> Result<Self, OrchestratorError> {
        let mut processed: Vec<(u64, String)> = store
            .scan_json::<u64>(PROCESSED_PREFIX)?
            .into_iter()
            .map(|(k, seq, _)| (seq, k[PROCESSED_PREFIX.len()..].to_string()))
            .collect();
        processed.sort();
        Ok(Self {
            store,
            bus,
            clock,
            registry,
            identity,
            runner,
            threads,
            thread_locks: Mutex::new(HashMap::new()),
            processed: Mutex::new(processed.into()),
        })
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn runner(&self) -> &Arc<dyn Runner> {
        &self.runner
    }

    fn thread_lock(&self, thread_id: &str) -> Arc<Mutex<()>> {
        self.thread_locks
            .lock()
            .entry(thread_id.to_string())
            .or_default()
            .clone()
    }

    pub fn get_instance(&self, instance_id: &str) -> Result<Option<Instance>, OrchestratorError> {
        Ok(self
            .store
            .get_json::<Instance>(&instance_key(instance_id))?
            .map(|(i, _)| i))
    }

    pub fn list_instances(&self) -> Result<Vec<Instance>, OrchestratorError> {
        Ok(load_instances(&self.store)?)
    }

    pub fn live_instance(
        &self,
        agent_id: &str,
        thread_id: &str,
    ) -> Result<Option<Instance>, OrchestratorError> {
        let Some((id, _)) = self.store.get_json::<String>(&live_key(agent_id, thread_id))? else {
            return Ok(None);
        };
        Ok(self.get_instance(&id)?.filter(|i| i.state.is_live()))
    }

    fn is_processed(&self, event_id: &str) -> bool {
        self.store.version(&format!("{PROCESSED_PREFIX}{event_id}")) > 0
    }

    fn mark_processed(&self, event_id: &str) -> Result<(), OrchestratorError> {
        let mut q = self.processed.lock();
        let seq = q.back().map(|(s, _)| s + 1).unwrap_or(1);
        self.store
            .put_json(&format!("{PROCESSED_PREFIX}{event_id}"), &seq, None)?;
        q.push_back((seq, event_id.to_string()));
        while q.len() > PROCESSED_RETENTION {
            if let Some((_, old)) = q.pop_front() {
                let key = format!("{PROCESSED_PREFIX}{old}");
                let v = self.store.version(&key);
                if v > 0 {
                    let _ = self.store.delete(&key, v);
                }
            }
        }
        Ok(())
    }

    /// CAS transition of one instance record. `f` may adjust other fields.
    fn transition(
        &self,
        instance_id: &str,
        next: InstanceState,
        f: impl Fn(&mut Instance),
    ) -> Result<Instance, OrchestratorError> {
        let (inst, _) = self.store.update_json::<Instance, OrchestratorError, _>(
            &instance_key(instance_id),
            |cur| {
                let mut inst =
                    cur.ok_or_else(|| OrchestratorError::UnknownInstance(instance_id.to_string()))?;
                if !inst.state.can_become(next) {
                    return Err(OrchestratorError::WrongState {
                        instance_id: instance_id.to_string(),
                        state: inst.state,
                    });
                }
                inst.state = next;
                f(&mut inst);
                if !next.is_live() {
                    inst.identity_id = None;
                    inst.workload_id = None;
                    inst.pending.clear();
                }
                Ok(inst)
            },
        )?;
        if !next.is_live() {
            let key = live_key(&inst.agent_id, &inst.thread_id);
            if let Some((owner, v)) = self.store.get_json::<String>(&key)? {
                if owner == inst.instance_id {
                    let _ = self.store.delete(&key, v);
                }
            }
        }
        self.publish_state(&inst)?;
        Ok(inst)
    }

    fn update_instance(
        &self,
        instance_id: &str,
        f: impl Fn(&mut Instance) -> Result<(), OrchestratorError>,
    ) -> Result<Instance, OrchestratorError> {
        Ok(self
            .store
            .update_json::<Instance, OrchestratorError, _>(&instance_key(instance_id), |cur| {
                let mut inst =
                    cur.ok_or_else(|| OrchestratorError::UnknownInstance(instance_id.to_string()))?;
                f(&mut inst)?;
                Ok(inst)
            })?
            .0)
    }

    fn publish_state(&self, inst: &Instance) -> Result<(), OrchestratorError> {
        let mut payload = json!({
            "instance_id": inst.instance_id,
            "agent_id": inst.agent_id,
            "thread_id": inst.thread_id,
            "state": inst.state,
            "revision": inst.definition_revision,
            "ts": self.clock.now_ms(),
        });
        if let Some(e) = &inst.error {
            payload["error"] = json!(e);
        }
        self.bus.publish(TOPIC_INSTANCE_STATE, payload)?;
        Ok(())
    }

    /// Reacts to one `thread.message` event: forward to the live instance or
    /// run the spawn sequence. Replaying a processed event id is a no-op.
    pub fn handle_message_event(
        &self,
        event: &Event,
        now: Millis,
    ) -> Result<ReconcileOutcome, OrchestratorError> {
        if event.topic != TOPIC_THREAD_MESSAGE {
            return Err(OrchestratorError::InvalidEvent(format!(
                "unexpected topic {}",
                event.topic
            )));
        }
        let thread_id = event.payload["thread_id"]
            .as_str()
            .ok_or_else(|| OrchestratorError::InvalidEvent("missing thread_id".into()))?
            .to_string();
        let lock = self.thread_lock(&thread_id);
        let _guard = lock.lock();

        let mut outcome = ReconcileOutcome {
            event_id: event.id.clone(),
            ..Default::default()
        };
        if self.is_processed(&event.id) {
            outcome.noop = true;
            return Ok(outcome);
        }
        let thread = self.threads.get(&thread_id)?;
        if event.payload["author"].as_str() == Some(&format!("agent:{}", thread.agent_id)) {
            outcome.ignored = true;
            self.mark_processed(&event.id)?;
            return Ok(outcome);
        }

        let result = self.reconcile(&thread.agent_id, &thread_id, &event.payload, now, &mut outcome);
        match &result {
            Err(OrchestratorError::Storage(_)) | Err(OrchestratorError::Bus(_)) => {}
            // spawn failures are final for this event; the instance is Failed
            _ => self.mark_processed(&event.id)?,
        }
        result.map(|()| outcome)
    }

    fn reconcile(
        &self,
        agent_id: &str,
        thread_id: &str,
        message: &Value,
        now: Millis,
        outcome: &mut ReconcileOutcome,
    ) -> Result<(), OrchestratorError> {
        if let Some(inst) = self.live_instance(agent_id, thread_id)? {
            outcome.instance_id = Some(inst.instance_id.clone());
            match inst.state {
                InstanceState::Running => {
                    let wl = inst.workload_id.clone().unwrap_or_default();
                    match self.runner.deliver_message(&wl, message.clone()) {
                        Ok(()) => {
                            // a sweep may have won the race; then fall through
                            match self.update_instance(&inst.instance_id, |i| {
                                if i.state != InstanceState::Running {
                                    return Err(OrchestratorError::WrongState {
                                        instance_id: i.instance_id.clone(),
                                        state: i.state,
                                    });
                                }
                                i.last_active_ts = i.last_active_ts.max(now);
                                Ok(())
                            }) {
                                Ok(_) => {
                                    outcome.forwarded = true;
                                    return Ok(());
                                }
                                Err(OrchestratorError::WrongState { .. }) => {}
                                Err(e) => return Err(e),
                            }
                        }
                        Err(e) => {
                            tracing::warn!(instance = %inst.instance_id, error = %e, "forward failed; replacing instance");
                            self.fail_instance(&inst.instance_id, &format!("forward failed: {e}"))?;
                        }
                    }
                    outcome.replaced = Some(inst.instance_id.clone());
                }
                InstanceState::Provisioning => {
                    self.update_instance(&inst.instance_id, |i| {
                        i.pending.push(message.clone());
                        Ok(())
                    })?;
                    outcome.queued = true;
                    return Ok(());
                }
                InstanceState::Stopping => {
                    self.finish_stop(&inst)?;
                    outcome.replaced = Some(inst.instance_id.clone());
                }
                InstanceState::Stopped | InstanceState::Failed => unreachable!(),
            }
        } else {
            // a stale index entry (crash between record and index update)
            let key = live_key(agent_id, thread_id);
            let v = self.store.version(&key);
            if v > 0 {
                let _ = self.store.delete(&key, v);
            }
        }
        let id = self.spawn(agent_id, thread_id, vec![message.clone()], now)?;
        outcome.instance_id = Some(id);
        outcome.spawned = true;
        Ok(())
    }

    /// Spawn sequence: secrets, then identity, then workload. Each failure
    /// rolls back what was created, in reverse, and leaves the instance
    /// Failed.
    fn spawn(
        &self,
        agent_id: &str,
        thread_id: &str,
        pending: Vec<Value>,
        now: Millis,
    ) -> Result<String, OrchestratorError> {
        let instance_id = format!("i-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]);
        self.store
            .put_json(&live_key(agent_id, thread_id), &instance_id, Some(0))?;
        let mut inst = Instance {
            instance_id: instance_id.clone(),
            agent_id: agent_id.to_string(),
            thread_id: thread_id.to_string(),
            definition_revision: 0,
            state: InstanceState::Provisioning,
            identity_id: None,
            workload_id: None,
            last_active_ts: now,
            created_ts: now,
            idle_timeout_s: crate::registry::DEFAULT_IDLE_TIMEOUT_S,
            keepalive_interval_s: crate::registry::DEFAULT_KEEPALIVE_INTERVAL_S,
            pending,
            error: None,
        };
        self.store
            .put_json(&instance_key(&instance_id), &inst, Some(0))?;
        self.publish_state(&inst)?;

        let failed = |reason: String| -> OrchestratorError {
            if let Err(e) = self.transition(&instance_id, InstanceState::Failed, |i| {
                i.error = Some(reason.clone())
            }) {
                tracing::error!(instance = %instance_id, error = %e, "could not mark instance failed");
            }
            OrchestratorError::SpawnFailed {
                instance_id: instance_id.clone(),
                reason,
            }
        };

        let harness = match self.registry.resolve_harness(agent_id) {
            Ok(h) => h,
            Err(e) => return Err(failed(format!("harness: {e}"))),
        };
        inst = self.update_instance(&instance_id, |i| {
            i.definition_revision = harness.revision;
            i.idle_timeout_s = harness.idle_timeout_s;
            i.keepalive_interval_s = harness.keepalive_interval_s;
            Ok(())
        })?;

        let (identity, credential) =
            match self
                .identity
                .mint_workload_identity(&instance_id, agent_id, thread_id, now)
            {
                Ok(x) => x,
                Err(e) => return Err(failed(format!("identity: {e}"))),
            };
        let identity_id = identity.identity_id.clone();
        self.update_instance(&instance_id, |i| {
            i.identity_id = Some(identity_id.clone());
            Ok(())
        })?;

        let workload_id = format!("wl-{}", &instance_id[2..]);
        let spec = self.workload_spec(&inst, &harness, &workload_id, credential.into_string())?;
        if let Err(e) = self.runner.create_workload(spec) {
            let _ = self.identity.delete_identity(&identity_id, self.clock.now_ms());
            return Err(failed(format!("runner: {e}")));
        }
        let running = self.transition(&instance_id, InstanceState::Running, |i| {
            i.workload_id = Some(workload_id.clone());
            i.last_active_ts = i.last_active_ts.max(self.clock.now_ms().max(now));
        });
        let running = match running {
            Ok(i) => i,
            Err(e) => {
                let _ = self.runner.stop_workload(&workload_id);
                let _ = self.identity.delete_identity(&identity_id, self.clock.now_ms());
                return Err(e);
            }
        };
        // messages queued after the context was built
        let delivered = inst.pending.len();
        let late: Vec<Value> = running.pending.iter().skip(delivered).cloned().collect();
        for m in late {
            let _ = self.runner.deliver_message(&workload_id, m);
        }
        if !running.pending.is_empty() {
            self.update_instance(&instance_id, |i| {
                i.pending.clear();
                Ok(())
            })?;
        }
        Ok(instance_id)
    }

    fn workload_spec(
        &self,
        inst: &Instance,
        harness: &ResolvedHarness,
        workload_id: &str,
        token: String,
    ) -> Result<WorkloadSpec, OrchestratorError> {
        let recent: Vec<Value> = self
            .threads
            .recent(&inst.thread_id, RECENT_MESSAGES)?
            .into_iter()
            .map(|m| serde_json::to_value(m).unwrap_or(Value::Null))
            .collect();
        Ok(WorkloadSpec {
            workload_id: workload_id.to_string(),
            containers: harness
                .containers
                .iter()
                .map(|c| ContainerLaunch {
                    name: c.name.clone(),
                    behavior: c.behavior.clone(),
                    env: c.env.clone(),
                    main: c.main,
                })
                .collect(),
            volume_mounts: harness
                .volumes
                .iter()
                .map(|v| VolumeMount {
                    volume: volume_name(&inst.agent_id, &inst.thread_id, &v.name),
                    mount_path: v.mount_path.clone(),
                })
                .collect(),
            identity_token: Some(token),
            thread_context: json!({
                "thread_id": inst.thread_id,
                "agent_id": inst.agent_id,
                "instance_id": inst.instance_id,
                "revision": harness.revision,
                "system_prompt": harness.system_prompt,
                "model": harness.model,
                "keepalive_interval_s": harness.keepalive_interval_s,
                "recent_messages": recent,
                "pending": inst.pending,
            }),
            labels: BTreeMap::from([
                ("agent_id".to_string(), inst.agent_id.clone()),
                ("thread_id".to_string(), inst.thread_id.clone()),
                ("instance_id".to_string(), inst.instance_id.clone()),
                ("revision".to_string(), harness.revision.to_string()),
            ]),
        })
    }

    /// Keep-alive ingress: `last_active_ts = max(last_active_ts, now)`.
    pub fn record_keepalive(&self, instance_id: &str, now: Millis) -> Result<Millis, OrchestratorError> {
        let inst = self.update_instance(instance_id, |i| {
            if i.state != InstanceState::Running {
                return Err(OrchestratorError::WrongState {
                    instance_id: instance_id.to_string(),
                    state: i.state,
                });
            }
            i.last_active_ts = i.last_active_ts.max(now);
            Ok(())
        })?;
        Ok(inst.last_active_ts)
    }

    /// Reclaims every Running instance idle for longer than its timeout, and
    /// finishes any stop left half-done. Per-instance failures are logged
    /// and skipped.
    pub fn sweep_idle(&self, now: Millis) -> Result<Vec<String>, OrchestratorError> {
        let mut reclaimed = Vec::new();
        for inst in self.list_instances()? {
            let candidate = match inst.state {
                InstanceState::Running => inst.is_idle(now),
                InstanceState::Stopping => true,
                _ => false,
            };
            if !candidate {
                continue;
            }
            let lock = self.thread_lock(&inst.thread_id);
            let _guard = lock.lock();
            match self.reclaim_if_idle(&inst.instance_id, now) {
                Ok(true) => reclaimed.push(inst.instance_id.clone()),
                Ok(false) => {}
                Err(e) => {
                    tracing::warn!(instance = %inst.instance_id, error = %e, "reclaim failed");
                }
            }
        }
        Ok(reclaimed)
    }

    fn reclaim_if_idle(&self, instance_id: &str, now: Millis) -> Result<bool, OrchestratorError> {
        let Some(inst) = self.get_instance(instance_id)? else {
            return Ok(false);
        };
        let stopping = match inst.state {
            InstanceState::Running => {
                // re-checked under CAS: a keep-alive may have landed
                match self.update_instance(instance_id, |i| {
                    if i.state != InstanceState::Running || !i.is_idle(now) {
                        return Err(OrchestratorError::WrongState {
                            instance_id: i.instance_id.clone(),
                            state: i.state,
                        });
                    }
                    i.state = InstanceState::Stopping;
                    Ok(())
                }) {
                    Ok(i) => {
                        self.publish_state(&i)?;
                        i
                    }
                    Err(OrchestratorError::WrongState { .. }) => return Ok(false),
                    Err(e) => return Err(e),
                }
            }
            InstanceState::Stopping => inst,
            _ => return Ok(false),
        };
        self.finish_stop(&stopping)?;
        Ok(true)
    }

    /// Stopping -> Stopped: stop the workload, and only once the runner
    /// confirms, delete the identity.
    fn finish_stop(&self, inst: &Instance) -> Result<(), OrchestratorError> {
        if let Some(wl) = &inst.workload_id {
            match self.runner.stop_workload(wl) {
                Ok(()) | Err(RunnerError::UnknownWorkload(_)) => {}
                Err(e) => return Err(OrchestratorError::Runner(e)),
            }
        }
        if let Some(id) = &inst.identity_id {
            match self.identity.delete_identity(id, self.clock.now_ms()) {
                Ok(()) | Err(IdentityError::NotFound(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.transition(&inst.instance_id, InstanceState::Stopped, |_| {})?;
        Ok(())
    }

    /// Provisioning/Running -> Failed, releasing whatever the instance held.
    fn fail_instance(&self, instance_id: &str, reason: &str) -> Result<(), OrchestratorError> {
        let Some(inst) = self.get_instance(instance_id)? else {
            return Err(OrchestratorError::UnknownInstance(instance_id.to_string()));
        };
        if let Some(wl) = &inst.workload_id {
            match self.runner.stop_workload(wl) {
                Ok(()) | Err(RunnerError::UnknownWorkload(_)) => {}
                Err(e) => return Err(OrchestratorError::Runner(e)),
            }
        }
        if let Some(id) = &inst.identity_id {
            match self.identity.delete_identity(id, self.clock.now_ms()) {
                Ok(()) | Err(IdentityError::NotFound(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.transition(instance_id, InstanceState::Failed, |i| {
            i.error = Some(reason.to_string())
        })?;
        Ok(())
    }

    /// Startup reconciliation against what the runner reports live.
    pub fn recover(
        &self,
        live_workloads: &[WorkloadHandle],
        now: Millis,
    ) -> Result<Vec<RecoveryAction>, OrchestratorError> {
        let _ = now;
        let mut actions = Vec::new();
        let instances = self.list_instances()?;
        let live_wl: HashSet<&str> = live_workloads.iter().map(|w| w.workload_id.as_str()).collect();
        let claimed: HashSet<String> = instances
            .iter()
            .filter(|i| i.state.is_live())
            .filter_map(|i| i.workload_id.clone())
            .collect();

        for w in live_workloads {
            if !claimed.contains(&w.workload_id) {
                match self.runner.stop_workload(&w.workload_id) {
                    Ok(()) | Err(RunnerError::UnknownWorkload(_)) => {}
                    Err(e) => return Err(OrchestratorError::RunnerUnavailable(e)),
                }
                actions.push(RecoveryAction::Stop {
                    workload_id: w.workload_id.clone(),
                });
            }
        }

        for inst in instances.iter().filter(|i| i.state.is_live()) {
            let lock = self.thread_lock(&inst.thread_id);
            let _guard = lock.lock();
            let has_workload = inst
                .workload_id
                .as_deref()
                .is_some_and(|w| live_wl.contains(w));
            let result = match inst.state {
                InstanceState::Running if has_workload => continue,
                InstanceState::Stopping => {
                    actions.push(RecoveryAction::FinishStop {
                        instance_id: inst.instance_id.clone(),
                    });
                    self.finish_stop(inst)
                }
                _ => {
                    actions.push(RecoveryAction::Fail {
                        instance_id: inst.instance_id.clone(),
                    });
                    self.fail_instance(&inst.instance_id, "lost during orchestrator restart")
                }
            };
            match result {
                Ok(()) => {}
                Err(OrchestratorError::Runner(e)) => return Err(OrchestratorError::RunnerUnavailable(e)),
                Err(e) => return Err(e),
            }
        }

        // index entries pointing at dead or missing records
        for (key, owner, v) in self.store.scan_json::<String>(LIVE_PREFIX)? {
            let live = self.get_instance(&owner)?.is_some_and(|i| i.state.is_live());
            if !live {
                let _ = self.store.delete(&key, v);
                let rest = &key[LIVE_PREFIX.len()..];
                let (agent_id, thread_id) = rest.split_once('/').unwrap_or((rest, ""));
                actions.push(RecoveryAction::DropIndex {
                    agent_id: agent_id.to_string(),
                    thread_id: thread_id.to_string(),
                });
            }
        }

        // workload identities minted for instances that never got recorded
        let live_ids: HashSet<String> = self
            .list_instances()?
            .into_iter()
            .filter(|i| i.state.is_live())
            .map(|i| i.instance_id)
            .collect();
        for ident in self.identity.list()? {
            if ident.class == IdentityClass::EphemeralWorkload && !live_ids.contains(&ident.subject) {
                match self.identity.delete_identity(&ident.identity_id, self.clock.now_ms()) {
                    Ok(()) | Err(IdentityError::NotFound(_)) => {}
                    Err(e) => return Err(e.into()),
                }
                actions.push(RecoveryAction::DeleteIdentity {
                    identity_id: ident.identity_id,
                });
            }
        }
        Ok(actions)
    }

    /// [`Self::recover`] against the runner's current listing.
    pub fn recover_from_runner(&self) -> Result<Vec<RecoveryAction>, OrchestratorError> {
        let live = self
            .runner
            .list_workloads()
            .map_err(OrchestratorError::RunnerUnavailable)?;
        self.recover(&live, self.clock.now_ms())
    }
}

#[cfg(test)]
mod tests;
