//! In-process simulated runner.
//!
//! Each container is a dedicated OS thread with a private env map and a
//! private scratch directory under `<root>/workloads/<id>/<container>`.
//! Volumes are directories under `<root>/volumes/`; attaching grants the
//! workload's containers a path, detaching revokes it.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde_json::{json, Value};

use super::behaviors::{builtin_behaviors, Behavior};
use super::mailbox::Mailbox;
use super::{
    ContainerRef, LoopbackMessage, Runner, RunnerError, WorkloadHandle, WorkloadSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub struct NetResponse {
    pub status: u16,
    pub body: Value,
}

impl NetResponse {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

/// What a workload's network proxy talks to (the gateway, in practice).
pub trait Network: Send + Sync {
    fn call(
        &self,
        credential: Option<&str>,
        method: &str,
        path: &str,
        body: Option<&Value>,
    ) -> NetResponse;
}

/// Late-bound network, so the runner can be built before the gateway. Holds
/// the network weakly; the owner keeps it alive.
#[derive(Clone, Default)]
pub struct NetworkSlot(Arc<OnceLock<Weak<dyn Network>>>);

impl NetworkSlot {
    pub fn new() -> Self {
        Self::default()
    }

    /// First binding wins.
    pub fn bind(&self, network: &Arc<dyn Network>) {
        let _ = self.0.set(Arc::downgrade(network));
    }

    fn get(&self) -> Option<Arc<dyn Network>> {
        self.0.get().and_then(Weak::upgrade)
    }
}

/// The workload's network-proxy scope: holds the credential and attaches it
/// to outbound calls. Containers can call through it but never read it.
#[derive(Clone)]
pub struct Proxy {
    token: Option<Arc<str>>,
    network: NetworkSlot,
}

impl std::fmt::Debug for Proxy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Proxy")
            .field("has_identity", &self.token.is_some())
            .finish()
    }
}

impl Proxy {
    pub fn call(&self, method: &str, path: &str, body: Option<&Value>) -> NetResponse {
        match self.network.get() {
            Some(n) => n.call(self.token.as_deref(), method, path, body),
            None => NetResponse {
                status: 503,
                body: json!({"code": "unavailable", "message": "no network bound"}),
            },
        }
    }

    pub fn post(&self, path: &str, body: &Value) -> NetResponse {
        self.call("POST", path, Some(body))
    }
}

struct FsMount {
    mount_path: String,
    dir: PathBuf,
    granted: Arc<AtomicBool>,
}

/// A container's view of the filesystem: its scratch directory plus the
/// workload's volume mounts (while attached).
pub struct ContainerFs {
    scratch: PathBuf,
    mounts: Vec<FsMount>,
}

impl std::fmt::Debug for ContainerFs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContainerFs")
            .field("mounts", &self.mount_paths())
            .finish()
    }
}

impl ContainerFs {
    pub fn mount_paths(&self) -> Vec<String> {
        self.mounts.iter().map(|m| m.mount_path.clone()).collect()
    }

    fn resolve(&self, path: &str) -> io::Result<PathBuf> {
        if !path.starts_with('/') || path.split('/').any(|s| s == "..") {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("path {path:?} must be absolute without '..'"),
            ));
        }
        for m in &self.mounts {
            let rest = if path == m.mount_path {
                Some("")
            } else {
                path.strip_prefix(&m.mount_path)
                    .and_then(|r| r.strip_prefix('/'))
            };
            if let Some(rest) = rest {
                if !m.granted.load(Ordering::SeqCst) {
                    return Err(io::Error::new(
                        io::ErrorKind::PermissionDenied,
                        format!("volume at {} is detached", m.mount_path),
                    ));
                }
                return Ok(m.dir.join(rest));
            }
        }
        Ok(self.scratch.join(path.trim_start_matches('/')))
    }

    pub fn write(&self, path: &str, data: &[u8]) -> io::Result<()> {
        let p = self.resolve(path)?;
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(&p)?;
        f.write_all(data)?;
        f.sync_all()
    }

    pub fn append(&self, path: &str, data: &[u8]) -> io::Result<()> {
        let p = self.resolve(path)?;
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&p)?;
        f.write_all(data)?;
        f.sync_all()
    }

    pub fn read(&self, path: &str) -> io::Result<Vec<u8>> {
        fs::read(self.resolve(path)?)
    }

    pub fn exists(&self, path: &str) -> bool {
        self.resolve(path).map(|p| p.exists()).unwrap_or(false)
    }
}

/// Everything a running container can touch.
pub struct ContainerContext {
    workload_id: String,
    name: String,
    main: bool,
    env: BTreeMap<String, String>,
    fs: ContainerFs,
    inbox: Arc<Mailbox<LoopbackMessage>>,
    thread_context: Value,
    thread_inbox: Option<Arc<Mailbox<Value>>>,
    proxy: Proxy,
    stop: Arc<Mailbox<()>>,
    shared: Weak<SimShared>,
}

impl std::fmt::Debug for ContainerContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContainerContext")
            .field("workload_id", &self.workload_id)
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

impl ContainerContext {
    pub fn workload_id(&self) -> &str {
        &self.workload_id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_main(&self) -> bool {
        self.main
    }

    pub fn env(&self) -> &BTreeMap<String, String> {
        &self.env
    }

    pub fn fs(&self) -> &ContainerFs {
        &self.fs
    }

    pub fn proxy(&self) -> &Proxy {
        &self.proxy
    }

    /// Thread context; `Null` for sidecars.
    pub fn thread_context(&self) -> &Value {
        &self.thread_context
    }

    /// Next thread message forwarded to this workload (main container only).
    pub fn next_message(&self, timeout: Duration) -> Option<Value> {
        match &self.thread_inbox {
            Some(m) => m.recv_timeout(timeout),
            None => {
                self.stop.wait_closed(timeout);
                None
            }
        }
    }

    pub fn recv_loopback(&self, timeout: Duration) -> Option<LoopbackMessage> {
        self.inbox.recv_timeout(timeout)
    }

    pub fn send_loopback(&self, to_container: &str, payload: &[u8]) -> Result<(), RunnerError> {
        let shared = self.shared.upgrade().ok_or(RunnerError::Unavailable)?;
        shared.loopback_send(
            &ContainerRef::new(&self.workload_id, &self.name),
            &ContainerRef::new(&self.workload_id, to_container),
            payload,
        )
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.is_closed()
    }

    /// Sleeps up to `d`; returns true if the workload was stopped meanwhile.
    pub fn sleep(&self, d: Duration) -> bool {
        self.stop.wait_closed(d)
    }
}

struct SimContainer {
    env: BTreeMap<String, String>,
    inbox: Arc<Mailbox<LoopbackMessage>>,
}

struct SimWorkload {
    handle: WorkloadHandle,
    containers: HashMap<String, SimContainer>,
    thread_inbox: Arc<Mailbox<Value>>,
    stop: Arc<Mailbox<()>>,
    grants: Vec<Arc<AtomicBool>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    scratch_root: PathBuf,
}

#[derive(Default)]
struct SimState {
    workloads: HashMap<String, Arc<SimWorkload>>,
    /// volume name -> workload holding it
    attached: HashMap<String, String>,
}

#[derive(Default)]
struct Faults {
    reject_creates: usize,
    unavailable: bool,
}

struct SimShared {
    root: PathBuf,
    behaviors: RwLock<HashMap<String, Arc<dyn Behavior>>>,
    network: NetworkSlot,
    state: Mutex<SimState>,
    faults: Mutex<Faults>,
    spawned: AtomicUsize,
}

/// The simulated runner. Cloning shares the same underlying runner.
#[derive(Clone)]
pub struct SimRunner {
    shared: Arc<SimShared>,
}

impl std::fmt::Debug for SimRunner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimRunner")
            .field("root", &self.shared.root)
            .finish_non_exhaustive()
    }
}

fn valid_volume_name(name: &str) -> bool {
    !name.is_empty()
        && name.split('/').all(|seg| {
            !seg.is_empty()
                && seg != "."
                && seg != ".."
                && seg
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        })
}

impl SimRunner {
    pub fn new(root: impl AsRef<Path>, network: NetworkSlot) -> io::Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("volumes"))?;
        fs::create_dir_all(root.join("workloads"))?;
        Ok(Self {
            shared: Arc::new(SimShared {
                root,
                behaviors: RwLock::new(builtin_behaviors()),
                network,
                state: Mutex::new(SimState::default()),
                faults: Mutex::new(Faults::default()),
                spawned: AtomicUsize::new(0),
            }),
        })
    }

    pub fn register_behavior(&self, id: &str, behavior: Arc<dyn Behavior>) {
        self.shared.behaviors.write().insert(id.to_string(), behavior);
    }

    pub fn volume_dir(&self, volume: &str) -> PathBuf {
        self.shared.root.join("volumes").join(volume)
    }

    /// Which workload currently holds `volume`.
    pub fn volume_holder(&self, volume: &str) -> Option<String> {
        self.shared.state.lock().attached.get(volume).cloned()
    }

    /// Filesystem view of a live container, as the container itself sees it.
    pub fn container_fs(&self, workload_id: &str, container: &str) -> Result<ContainerFs, RunnerError> {
        let wl = self.shared.workload(workload_id)?;
        if !wl.containers.contains_key(container) {
            return Err(RunnerError::UnknownContainer {
                workload_id: workload_id.to_string(),
                container: container.to_string(),
            });
        }
        Ok(self.shared.fs_for(&wl, container))
    }

    /// Removes and returns everything waiting in a container's loopback
    /// inbox (for behaviors that do not consume it, e.g. `noop`).
    pub fn drain_inbox(&self, target: &ContainerRef) -> Result<Vec<LoopbackMessage>, RunnerError> {
        let wl = self.shared.workload(&target.workload_id)?;
        let c = wl
            .containers
            .get(&target.container)
            .ok_or_else(|| RunnerError::UnknownContainer {
                workload_id: target.workload_id.clone(),
                container: target.container.clone(),
            })?;
        Ok(c.inbox.drain())
    }

    /// Fault injection: reject the next `n` create calls.
    pub fn reject_next_creates(&self, n: usize) {
        self.shared.faults.lock().reject_creates = n;
    }

    /// Fault injection: make control calls fail with `Unavailable`.
    pub fn set_available(&self, available: bool) {
        self.shared.faults.lock().unavailable = !available;
    }

    /// Total workloads ever created by this runner.
    pub fn spawn_count(&self) -> usize {
        self.shared.spawned.load(Ordering::SeqCst)
    }
}

impl SimShared {
    fn check_available(&self) -> Result<(), RunnerError> {
        if self.faults.lock().unavailable {
            Err(RunnerError::Unavailable)
        } else {
            Ok(())
        }
    }

    fn workload(&self, id: &str) -> Result<Arc<SimWorkload>, RunnerError> {
        self.state
            .lock()
            .workloads
            .get(id)
            .cloned()
            .ok_or_else(|| RunnerError::UnknownWorkload(id.to_string()))
    }

    fn fs_for(&self, wl: &SimWorkload, container: &str) -> ContainerFs {
        ContainerFs {
            scratch: wl.scratch_root.join(container),
            mounts: wl
                .handle
                .volumes
                .iter()
                .zip(&wl.grants)
                .zip(self.mount_paths(wl))
                .map(|((vol, grant), mount_path)| FsMount {
                    mount_path,
                    dir: self.root.join("volumes").join(vol),
                    granted: grant.clone(),
                })
                .collect(),
        }
    }

    fn mount_paths(&self, wl: &SimWorkload) -> Vec<String> {
        wl.handle
            .labels
            .get("~mounts")
            .map(|m| m.split('\n').map(str::to_string).collect())
            .unwrap_or_default()
    }

    fn loopback_send(
        &self,
        from: &ContainerRef,
        to: &ContainerRef,
        message: &[u8],
    ) -> Result<(), RunnerError> {
        if from.workload_id != to.workload_id {
            return Err(RunnerError::CrossWorkload {
                from: format!("{}/{}", from.workload_id, from.container),
                to: format!("{}/{}", to.workload_id, to.container),
            });
        }
        let wl = self.workload(&from.workload_id)?;
        let unknown = |c: &str| RunnerError::UnknownContainer {
            workload_id: from.workload_id.clone(),
            container: c.to_string(),
        };
        if !wl.containers.contains_key(&from.container) {
            return Err(unknown(&from.container));
        }
        let target = wl
            .containers
            .get(&to.container)
            .ok_or_else(|| unknown(&to.container))?;
        target.inbox.push(LoopbackMessage {
            from: from.container.clone(),
            payload: message.to_vec(),
        });
        Ok(())
    }
}

impl Runner for SimRunner {
    fn create_workload(&self, spec: WorkloadSpec) -> Result<WorkloadHandle, RunnerError> {
        let shared = &self.shared;
        shared.check_available()?;
        {
            let mut faults = shared.faults.lock();
            if faults.reject_creates > 0 {
                faults.reject_creates -= 1;
                return Err(RunnerError::Rejected("injected fault".into()));
            }
        }
        if spec.workload_id.is_empty() || !valid_volume_name(&spec.workload_id) || spec.workload_id.contains('/') {
            return Err(RunnerError::InvalidSpec(format!(
                "invalid workload id {:?}",
                spec.workload_id
            )));
        }
        let mains = spec.containers.iter().filter(|c| c.main).count();
        if mains != 1 {
            return Err(RunnerError::InvalidSpec(format!(
                "exactly one main container required, got {mains}"
            )));
        }
        let behaviors: Vec<Arc<dyn Behavior>> = {
            let registry = shared.behaviors.read();
            spec.containers
                .iter()
                .map(|c| {
                    registry
                        .get(&c.behavior)
                        .cloned()
                        .ok_or_else(|| RunnerError::UnknownBehavior(c.behavior.clone()))
                })
                .collect::<Result<_, _>>()?
        };
        for m in &spec.volume_mounts {
            if !valid_volume_name(&m.volume) {
                return Err(RunnerError::InvalidSpec(format!("invalid volume name {:?}", m.volume)));
            }
        }

        let scratch_root = shared.root.join("workloads").join(&spec.workload_id);
        let mut labels = spec.labels.clone();
        labels.insert(
            "~mounts".into(),
            spec.volume_mounts
                .iter()
                .map(|m| m.mount_path.clone())
                .collect::<Vec<_>>()
                .join("\n"),
        );
        let handle = WorkloadHandle {
            workload_id: spec.workload_id.clone(),
            containers: spec.containers.iter().map(|c| c.name.clone()).collect(),
            volumes: spec.volume_mounts.iter().map(|m| m.volume.clone()).collect(),
            labels,
        };
        let workload = Arc::new(SimWorkload {
            handle: handle.clone(),
            containers: spec
                .containers
                .iter()
                .map(|c| {
                    (
                        c.name.clone(),
                        SimContainer {
                            env: c.env.clone(),
                            inbox: Arc::new(Mailbox::new()),
                        },
                    )
                })
                .collect(),
            thread_inbox: Arc::new(Mailbox::new()),
            stop: Arc::new(Mailbox::new()),
            grants: spec
                .volume_mounts
                .iter()
                .map(|_| Arc::new(AtomicBool::new(true)))
                .collect(),
            threads: Mutex::new(Vec::new()),
            scratch_root: scratch_root.clone(),
        });

        {
            let mut st = shared.state.lock();
            if st.workloads.contains_key(&spec.workload_id) {
                return Err(RunnerError::DuplicateWorkload(spec.workload_id.clone()));
            }
            if let Some(busy) = spec
                .volume_mounts
                .iter()
                .find(|m| st.attached.contains_key(&m.volume))
            {
                return Err(RunnerError::VolumeBusy(busy.volume.clone()));
            }
            for m in &spec.volume_mounts {
                st.attached
                    .insert(m.volume.clone(), spec.workload_id.clone());
            }
            st.workloads
                .insert(spec.workload_id.clone(), workload.clone());
        }

        let setup = (|| -> io::Result<()> {
            for m in &spec.volume_mounts {
                fs::create_dir_all(shared.root.join("volumes").join(&m.volume))?;
            }
            for c in &spec.containers {
                fs::create_dir_all(scratch_root.join(&c.name))?;
            }
            Ok(())
        })();
        if let Err(e) = setup {
            let _ = self.stop_workload(&spec.workload_id);
            return Err(e.into());
        }

        let token: Option<Arc<str>> = spec.identity_token.as_deref().map(Arc::from);
        let mut threads = Vec::new();
        for (c, behavior) in spec.containers.iter().zip(behaviors) {
            let ctx = ContainerContext {
                workload_id: spec.workload_id.clone(),
                name: c.name.clone(),
                main: c.main,
                env: c.env.clone(),
                fs: shared.fs_for(&workload, &c.name),
                inbox: workload.containers[&c.name].inbox.clone(),
                thread_context: if c.main {
                    spec.thread_context.clone()
                } else {
                    Value::Null
                },
                thread_inbox: c.main.then(|| workload.thread_inbox.clone()),
                proxy: Proxy {
                    token: token.clone(),
                    network: shared.network.clone(),
                },
                stop: workload.stop.clone(),
                shared: Arc::downgrade(shared),
            };
            let h = std::thread::Builder::new()
                .name(format!("{}:{}", spec.workload_id, c.name))
                .spawn(move || behavior.run(ctx))?;
            threads.push(h);
        }
        *workload.threads.lock() = threads;
        shared.spawned.fetch_add(1, Ordering::SeqCst);
        Ok(handle)
    }

    fn stop_workload(&self, workload_id: &str) -> Result<(), RunnerError> {
        let shared = &self.shared;
        shared.check_available()?;
        let wl = shared
            .state
            .lock()
            .workloads
            .remove(workload_id)
            .ok_or_else(|| RunnerError::UnknownWorkload(workload_id.to_string()))?;

        wl.stop.close();
        wl.thread_inbox.close();
        for c in wl.containers.values() {
            c.inbox.close();
        }
        let threads = std::mem::take(&mut *wl.threads.lock());
        let me = std::thread::current().id();
        for h in threads {
            if h.thread().id() != me {
                let _ = h.join();
            }
        }
        for g in &wl.grants {
            g.store(false, Ordering::SeqCst);
        }
        {
            let mut st = shared.state.lock();
            for v in &wl.handle.volumes {
                if st.attached.get(v).map(String::as_str) == Some(workload_id) {
                    st.attached.remove(v);
                }
            }
        }
        let _ = fs::remove_dir_all(&wl.scratch_root);
        Ok(())
    }

    fn list_workloads(&self) -> Result<Vec<WorkloadHandle>, RunnerError> {
        self.shared.check_available()?;
        let st = self.shared.state.lock();
        let mut out: Vec<WorkloadHandle> = st
            .workloads
            .values()
            .map(|w| {
                let mut h = w.handle.clone();
                h.labels.remove("~mounts");
                h
            })
            .collect();
        out.sort_by(|a, b| a.workload_id.cmp(&b.workload_id));
        Ok(out)
    }

    fn loopback_send(
        &self,
        from: &ContainerRef,
        to: &ContainerRef,
        message: &[u8],
    ) -> Result<(), RunnerError> {
        self.shared.loopback_send(from, to, message)
    }

    fn inspect_env(
        &self,
        workload_id: &str,
        container: &str,
    ) -> Result<BTreeMap<String, String>, RunnerError> {
        let wl = self.shared.workload(workload_id)?;
        wl.containers
            .get(container)
            .map(|c| c.env.clone())
            .ok_or_else(|| RunnerError::UnknownContainer {
                workload_id: workload_id.to_string(),
                container: container.to_string(),
            })
    }

    fn deliver_message(&self, workload_id: &str, message: Value) -> Result<(), RunnerError> {
        let wl = self.shared.workload(workload_id)?;
        if wl.thread_inbox.push(message) {
            Ok(())
        } else {
            Err(RunnerError::UnknownWorkload(workload_id.to_string()))
        }
    }
}
