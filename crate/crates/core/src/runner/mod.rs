//! Workload runner boundary.
//!
//! A workload is one main container plus zero or more sidecars. Containers
//! share nothing but a loopback channel and the workload's attached volumes;
//! each sees only its own env map. The workload's overlay credential lives in
//! the network-proxy scope and is never placed in any env.
//!
//! [`Runner`] is the seam a real cluster backend would implement;
//! [`SimRunner`] implements it in-process.

mod behaviors;
mod mailbox;
mod sim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use behaviors::{Behavior, AGENT_BUSY_ENV, BUILTIN_BEHAVIORS};
pub use mailbox::Mailbox;
pub use sim::{ContainerContext, ContainerFs, NetResponse, Network, NetworkSlot, Proxy, SimRunner};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerLaunch {
    pub name: String,
    pub behavior: String,
    pub env: BTreeMap<String, String>,
    pub main: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeMount {
    /// Runner-wide volume name; `/`-separated components.
    pub volume: String,
    pub mount_path: String,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub workload_id: String,
    pub containers: Vec<ContainerLaunch>,
    /// Attached to every container of the workload.
    pub volume_mounts: Vec<VolumeMount>,
    /// Overlay credential, handed to the proxy scope only.
    pub identity_token: Option<String>,
    /// Thread id, recent messages, prompt, model, and pending messages;
    /// delivered to the main container.
    pub thread_context: Value,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl std::fmt::Debug for WorkloadSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkloadSpec")
            .field("workload_id", &self.workload_id)
            .field(
                "containers",
                &self.containers.iter().map(|c| &c.name).collect::<Vec<_>>(),
            )
            .field("volume_mounts", &self.volume_mounts)
            .field("labels", &self.labels)
            .finish_non_exhaustive()
    }
}

/// What the runner reports about a live workload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadHandle {
    pub workload_id: String,
    pub containers: Vec<String>,
    pub volumes: Vec<String>,
    pub labels: BTreeMap<String, String>,
}

/// Addresses one container of one workload.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ContainerRef {
    pub workload_id: String,
    pub container: String,
}

impl ContainerRef {
    pub fn new(workload_id: impl Into<String>, container: impl Into<String>) -> Self {
        Self {
            workload_id: workload_id.into(),
            container: container.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopbackMessage {
    pub from: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("volume {0} is attached to another workload")]
    VolumeBusy(String),
    #[error("unknown behavior {0:?}")]
    UnknownBehavior(String),
    #[error("unknown workload {0}")]
    UnknownWorkload(String),
    #[error("unknown container {container} in workload {workload_id}")]
    UnknownContainer {
        workload_id: String,
        container: String,
    },
    #[error("loopback across workloads ({from} -> {to}) is not permitted")]
    CrossWorkload { from: String, to: String },
    #[error("workload {0} already exists")]
    DuplicateWorkload(String),
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("runner rejected workload: {0}")]
    Rejected(String),
    #[error("runner unavailable")]
    Unavailable,
    #[error("runner i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub trait Runner: Send + Sync {
    fn create_workload(&self, spec: WorkloadSpec) -> Result<WorkloadHandle, RunnerError>;

    /// Terminates every container, detaches volumes (their contents stay),
    /// and returns once the workload is fully stopped.
    fn stop_workload(&self, workload_id: &str) -> Result<(), RunnerError>;

    fn list_workloads(&self) -> Result<Vec<WorkloadHandle>, RunnerError>;

    fn loopback_send(
        &self,
        from: &ContainerRef,
        to: &ContainerRef,
        message: &[u8],
    ) -> Result<(), RunnerError>;

    /// The exact env map a container sees. Diagnostic surface.
    fn inspect_env(
        &self,
        workload_id: &str,
        container: &str,
    ) -> Result<BTreeMap<String, String>, RunnerError>;

    /// Hands a thread message to the workload's main container.
    fn deliver_message(&self, workload_id: &str, message: Value) -> Result<(), RunnerError>;
}
