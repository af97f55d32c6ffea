//! Wires every module into one running control plane.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authz::{Authz, AuthzError};
use crate::clock::{Clock, SystemClock};
use crate::events::{BusError, EventBus, DEFAULT_REDELIVERY_MS};
use crate::gateway::{Gateway, UserTable};
use crate::identity::{IdentityProvider, DEFAULT_SERVICE_TTL_S};
use crate::orchestrator::{
    Orchestrator, OrchestratorError, OrchestratorService, RecoveryAction, ServiceConfig,
};
use crate::registry::{Registry, SealError, Sealer};
use crate::runner::{NetworkSlot, Runner, SimRunner};
use crate::store::{Store, StoreError, StoreOptions};
use crate::threads::Threads;

const SIGNING_KEY: &str = "sys/signing-key";

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Seal(#[from] SealError),
    #[error(transparent)]
    Authz(#[from] AuthzError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt signing key record")]
    SigningKey,
}

#[derive(Debug, Clone)]
pub struct PlatformConfig {
    /// Store directory; `None` keeps state in memory.
    pub data_dir: Option<PathBuf>,
    /// Simulated runner root (volumes and container scratch).
    pub runner_root: PathBuf,
    pub master_key: [u8; 32],
    pub provision_token: String,
    pub users: UserTable,
    pub redelivery_ms: u64,
    pub orchestrator: ServiceConfig,
    /// Lease GC period. Defaults to the default service ttl.
    pub lease_gc_period: Duration,
    pub store: StoreOptions,
}

impl PlatformConfig {
    pub fn new(runner_root: impl Into<PathBuf>, master_key: [u8; 32], users: UserTable) -> Self {
        Self {
            data_dir: None,
            runner_root: runner_root.into(),
            master_key,
            provision_token: String::new(),
            users,
            redelivery_ms: DEFAULT_REDELIVERY_MS,
            orchestrator: ServiceConfig::default(),
            lease_gc_period: Duration::from_secs(DEFAULT_SERVICE_TTL_S),
            store: StoreOptions::default(),
        }
    }
}

/// Shared handles to every module, as the gateway's backend sees them.
pub struct Services {
    pub store: Arc<Store>,
    pub bus: Arc<EventBus>,
    pub clock: Arc<dyn Clock>,
    pub registry: Arc<Registry>,
    pub identity: Arc<IdentityProvider>,
    pub authz: Arc<Authz>,
    pub threads: Arc<Threads>,
    pub runner: Arc<dyn Runner>,
    orchestrator: RwLock<Option<Arc<Orchestrator>>>,
}

impl std::fmt::Debug for Services {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Services").finish_non_exhaustive()
    }
}

impl Services {
    /// The orchestrator, unless it is down.
    pub fn orchestrator(&self) -> Option<Arc<Orchestrator>> {
        self.orchestrator.read().clone()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SealedKey {
    nonce: String,
    ciphertext: String,
}

fn load_signing_key(store: &Store, sealer: &Sealer) -> Result<[u8; 32], PlatformError> {
    if let Some((k, _)) = store.get_json::<SealedKey>(SIGNING_KEY)? {
        let nonce = hex::decode(k.nonce).map_err(|_| PlatformError::SigningKey)?;
        let ct = hex::decode(k.ciphertext).map_err(|_| PlatformError::SigningKey)?;
        let raw = sealer.open(SIGNING_KEY, &nonce, &ct)?;
        return raw.try_into().map_err(|_| PlatformError::SigningKey);
    }
    let key: [u8; 32] = rand::random();
    let (nonce, ct) = sealer.seal(SIGNING_KEY, &key)?;
    let rec = SealedKey {
        nonce: hex::encode(nonce),
        ciphertext: hex::encode(ct),
    };
    match store.put_json(SIGNING_KEY, &rec, Some(0)) {
        Ok(_) => Ok(key),
        // another starter won; use its key
        Err(e) if e.is_conflict() => load_signing_key(store, sealer),
        Err(e) => Err(e.into()),
    }
}

struct Loop {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

pub struct Platform {
    services: Arc<Services>,
    gateway: Arc<Gateway>,
    sim: SimRunner,
    config: PlatformConfig,
    orchestrator: Mutex<Option<OrchestratorService>>,
    gc: Mutex<Option<Loop>>,
    gc_sweeps: Arc<AtomicU64>,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform").finish_non_exhaustive()
    }
}

impl Platform {
    /// Opens state, recovers, and starts the orchestrator and lease GC.
    pub fn start(config: PlatformConfig) -> Result<Arc<Self>, PlatformError> {
        Self::start_with_clock(config, Arc::new(SystemClock::new()))
    }

    pub fn start_with_clock(
        config: PlatformConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Arc<Self>, PlatformError> {
        let store = Arc::new(match &config.data_dir {
            Some(dir) => Store::open_with(dir, config.store.clone())?,
            None => Store::in_memory(),
        });
        let sealer = Sealer::new(config.master_key);
        let signing_key = load_signing_key(&store, &sealer)?;
        let bus = EventBus::open(store.clone(), clock.clone(), config.redelivery_ms)?;
        let registry = Arc::new(Registry::new(store.clone(), bus.clone(), clock.clone(), sealer));
        let identity = Arc::new(IdentityProvider::new(
            store.clone(),
            bus.clone(),
            signing_key,
            &config.provision_token,
        ));
        let authz = Arc::new(Authz::open(store.clone())?);
        let threads = Arc::new(Threads::new(store.clone(), bus.clone(), clock.clone()));
        let network = NetworkSlot::new();
        let sim = SimRunner::new(&config.runner_root, network.clone())?;
        let services = Arc::new(Services {
            store,
            bus,
            clock,
            registry,
            identity,
            authz,
            threads,
            runner: Arc::new(sim.clone()),
            orchestrator: RwLock::new(None),
        });
        let gateway = Arc::new(Gateway::new(services.clone(), config.users.clone()));
        let as_network: Arc<dyn crate::runner::Network> = gateway.clone();
        network.bind(&as_network);

        let platform = Arc::new(Self {
            services,
            gateway,
            sim,
            config,
            orchestrator: Mutex::new(None),
            gc: Mutex::new(None),
            gc_sweeps: Arc::new(AtomicU64::new(0)),
        });
        platform.restart_orchestrator()?;
        platform.start_gc();
        Ok(platform)
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn sim_runner(&self) -> &SimRunner {
        &self.sim
    }

    pub fn orchestrator(&self) -> Option<Arc<Orchestrator>> {
        self.services.orchestrator()
    }

    pub fn lease_gc_sweeps(&self) -> u64 {
        self.gc_sweeps.load(Ordering::SeqCst)
    }

    pub fn orchestrator_sweeps(&self) -> u64 {
        self.orchestrator.lock().as_ref().map_or(0, |s| s.sweeps())
    }

    /// Simulates an orchestrator crash: its loops stop mid-flight and its
    /// in-memory state is discarded. Workloads keep running.
    pub fn kill_orchestrator(&self) {
        *self.services.orchestrator.write() = None;
        if let Some(svc) = self.orchestrator.lock().take() {
            svc.stop();
        }
    }

    /// Starts a fresh orchestrator (recovery first) and returns the
    /// corrective actions recovery took.
    pub fn restart_orchestrator(&self) -> Result<Vec<RecoveryAction>, PlatformError> {
        self.kill_orchestrator();
        let s = &self.services;
        let orch = Arc::new(Orchestrator::new(
            s.store.clone(),
            s.bus.clone(),
            s.clock.clone(),
            s.registry.clone(),
            s.identity.clone(),
            s.runner.clone(),
            s.threads.clone(),
        )?);
        let svc = OrchestratorService::start(orch.clone(), &s.bus, self.config.orchestrator.clone())?;
        let actions = svc.recovery().to_vec();
        *self.services.orchestrator.write() = Some(orch);
        *self.orchestrator.lock() = Some(svc);
        Ok(actions)
    }

    fn start_gc(&self) {
        let stop = Arc::new(AtomicBool::new(false));
        let (identity, clock, sweeps, period) = (
            self.services.identity.clone(),
            self.services.clock.clone(),
            self.gc_sweeps.clone(),
            self.config.lease_gc_period,
        );
        let stop2 = stop.clone();
        let handle = std::thread::Builder::new()
            .name("lease-gc".into())
            .spawn(move || {
                let tick = Duration::from_millis(20);
                let mut waited = Duration::ZERO;
                while !stop2.load(Ordering::SeqCst) {
                    std::thread::sleep(tick);
                    waited += tick;
                    if waited < period {
                        continue;
                    }
                    waited = Duration::ZERO;
                    match identity.gc_sweep(clock.now_ms()) {
                        Ok(c) if !c.is_empty() => tracing::info!(collected = c.len(), "lease gc"),
                        Ok(_) => {}
                        Err(e) => tracing::warn!(error = %e, "lease gc failed"),
                    }
                    sweeps.fetch_add(1, Ordering::SeqCst);
                }
            })
            .expect("spawn lease gc");
        *self.gc.lock() = Some(Loop { stop, handle });
    }

    /// Stops background loops and every workload.
    pub fn shutdown(&self) {
        self.kill_orchestrator();
        if let Some(l) = self.gc.lock().take() {
            l.stop.store(true, Ordering::SeqCst);
            let _ = l.handle.join();
        }
        if let Ok(all) = self.sim.list_workloads() {
            for w in all {
                let _ = self.sim.stop_workload(&w.workload_id);
            }
        }
    }
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.shutdown();
    }
}
