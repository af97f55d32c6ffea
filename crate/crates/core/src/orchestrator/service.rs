//! Background loops around an [`Orchestrator`]: the `thread.message`
//! consumer (fanned out to workers by thread so one thread's events stay
//! ordered) and the idle sweeper.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::events::{Delivery, EventBus, Subscription, TOPIC_THREAD_MESSAGE};

use super::{InstanceState, Orchestrator, OrchestratorError, RecoveryAction};

pub const CONSUMER_GROUP: &str = "orchestrator";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workers: usize,
    /// Fixed sweep period. `None` derives it from live instances:
    /// min(idle_timeout) / 10, floored at one second.
    pub sweep_period: Option<Duration>,
    pub poll: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: 8,
            sweep_period: None,
            poll: Duration::from_millis(50),
        }
    }
}

/// Running orchestrator loops. Dropping it stops them.
pub struct OrchestratorService {
    orch: Arc<Orchestrator>,
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
    recovery: Vec<RecoveryAction>,
    sweeps: Arc<AtomicU64>,
}

impl std::fmt::Debug for OrchestratorService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OrchestratorService")
            .field("recovery", &self.recovery)
            .finish_non_exhaustive()
    }
}

fn sweep_period(orch: &Orchestrator, cfg: &ServiceConfig) -> Duration {
    if let Some(p) = cfg.sweep_period {
        return p;
    }
    let min_idle_ms = orch
        .list_instances()
        .ok()
        .and_then(|all| {
            all.iter()
                .filter(|i| i.state == InstanceState::Running)
                .map(|i| i.idle_timeout_s * 1000)
                .min()
        })
        .unwrap_or(1000);
    Duration::from_millis((min_idle_ms / 10).max(1000))
}

impl OrchestratorService {
    /// Runs recovery against the runner, then starts consuming. A runner
    /// that cannot be listed aborts startup.
    pub fn start(
        orch: Arc<Orchestrator>,
        bus: &Arc<EventBus>,
        cfg: ServiceConfig,
    ) -> Result<Self, OrchestratorError> {
        let recovery = orch.recover_from_runner()?;
        if !recovery.is_empty() {
            tracing::info!(actions = recovery.len(), "recovery applied");
        }
        let stop = Arc::new(AtomicBool::new(false));
        let sweeps = Arc::new(AtomicU64::new(0));
        let sub = Arc::new(bus.subscribe(TOPIC_THREAD_MESSAGE, CONSUMER_GROUP));
        let mut handles = Vec::new();

        let mut senders = Vec::new();
        for n in 0..cfg.workers.max(1) {
            let (tx, rx) = mpsc::channel::<Delivery>();
            senders.push(tx);
            let (orch, sub, stop) = (orch.clone(), sub.clone(), stop.clone());
            handles.push(
                std::thread::Builder::new()
                    .name(format!("orch-worker-{n}"))
                    .spawn(move || worker(orch, sub, rx, stop))
                    .expect("spawn worker"),
            );
        }

        {
            let (sub, stop, poll) = (sub.clone(), stop.clone(), cfg.poll);
            handles.push(
                std::thread::Builder::new()
                    .name("orch-dispatch".into())
                    .spawn(move || {
                        while !stop.load(Ordering::SeqCst) {
                            let Some(d) = sub.recv_timeout(poll) else {
                                continue;
                            };
                            let mut h = DefaultHasher::new();
                            d.event.payload["thread_id"].as_str().unwrap_or("").hash(&mut h);
                            let idx = (h.finish() % senders.len() as u64) as usize;
                            if senders[idx].send(d).is_err() {
                                break;
                            }
                        }
                    })
                    .expect("spawn dispatcher"),
            );
        }

        {
            let (orch, stop, sweeps) = (orch.clone(), stop.clone(), sweeps.clone());
            handles.push(
                std::thread::Builder::new()
                    .name("orch-sweep".into())
                    .spawn(move || {
                        let mut waited = Duration::ZERO;
                        let tick = Duration::from_millis(20);
                        while !stop.load(Ordering::SeqCst) {
                            std::thread::sleep(tick);
                            waited += tick;
                            if waited < sweep_period(&orch, &cfg) {
                                continue;
                            }
                            waited = Duration::ZERO;
                            let now = orch.clock().now_ms();
                            match orch.sweep_idle(now) {
                                Ok(r) if !r.is_empty() => {
                                    tracing::info!(reclaimed = r.len(), "idle sweep")
                                }
                                Ok(_) => {}
                                Err(e) => tracing::warn!(error = %e, "idle sweep failed"),
                            }
                            sweeps.fetch_add(1, Ordering::SeqCst);
                        }
                    })
                    .expect("spawn sweeper"),
            );
        }

        Ok(Self {
            orch,
            stop,
            handles,
            recovery,
            sweeps,
        })
    }

    pub fn orchestrator(&self) -> &Arc<Orchestrator> {
        &self.orch
    }

    /// Actions taken by startup recovery.
    pub fn recovery(&self) -> &[RecoveryAction] {
        &self.recovery
    }

    pub fn sweeps(&self) -> u64 {
        self.sweeps.load(Ordering::SeqCst)
    }

    /// Stops the loops. Events taken but not yet handled stay unacknowledged
    /// and are redelivered to the next consumer.
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for OrchestratorService {
    fn drop(&mut self) {
        self.halt();
    }
}

fn worker(
    orch: Arc<Orchestrator>,
    sub: Arc<Subscription>,
    rx: mpsc::Receiver<Delivery>,
    stop: Arc<AtomicBool>,
) {
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let d = match rx.recv_timeout(Duration::from_millis(50)) {
            Ok(d) => d,
            Err(mpsc::RecvTimeoutError::Timeout) => continue,
            Err(mpsc::RecvTimeoutError::Disconnected) => return,
        };
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let now = orch.clock().now_ms();
        let ack = match orch.handle_message_event(&d.event, now) {
            Ok(_) => true,
            Err(e @ (OrchestratorError::Storage(_) | OrchestratorError::Bus(_))) => {
                tracing::warn!(event = %d.event.id, error = %e, "event left for redelivery");
                false
            }
            Err(e) => {
                tracing::warn!(event = %d.event.id, error = %e, "event handled with error");
                true
            }
        };
        if ack {
            if let Err(e) = sub.ack(&d.event.id) {
                tracing::warn!(event = %d.event.id, error = %e, "ack failed");
            }
        }
    }
}
