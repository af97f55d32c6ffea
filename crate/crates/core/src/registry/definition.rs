use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub const DEFAULT_IDLE_TIMEOUT_S: u64 = 300;
pub const DEFAULT_KEEPALIVE_INTERVAL_S: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerSpec {
    pub name: String,
    /// Simulated behavior id (`echo-agent`, `mock-mcp`, ...).
    pub image_or_behavior: String,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

impl ContainerSpec {
    pub fn new(name: impl Into<String>, behavior: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            image_or_behavior: behavior.into(),
            env: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSpec {
    pub name: String,
    pub mount_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecretBinding {
    pub secret_name: String,
    pub target_container: String,
    pub env_var: String,
}

fn default_idle() -> u64 {
    DEFAULT_IDLE_TIMEOUT_S
}

fn default_keepalive() -> u64 {
    DEFAULT_KEEPALIVE_INTERVAL_S
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

/// Canonical agent document. The same JSON shape is used by definition
/// files, the HTTP API, and the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDefinition {
    pub agent_id: String,
    /// Assigned by the registry; ignored on input.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub revision: u64,
    pub system_prompt: String,
    pub model: String,
    pub main_container: ContainerSpec,
    #[serde(default)]
    pub sidecars: Vec<ContainerSpec>,
    #[serde(default)]
    pub secret_bindings: Vec<SecretBinding>,
    #[serde(default)]
    pub volumes: Vec<VolumeSpec>,
    #[serde(default = "default_idle")]
    pub idle_timeout_s: u64,
    #[serde(default = "default_keepalive")]
    pub keepalive_interval_s: u64,
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn valid_env_var(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl AgentDefinition {
    pub fn containers(&self) -> impl Iterator<Item = &ContainerSpec> {
        std::iter::once(&self.main_container).chain(self.sidecars.iter())
    }

    /// Checks the structural invariants. Secret existence is only checked at
    /// resolution time.
    pub fn validate(&self) -> Result<(), String> {
        if !valid_ident(&self.agent_id) {
            return Err(format!(
                "agent_id {:?} must be 1-128 chars of [A-Za-z0-9._-]",
                self.agent_id
            ));
        }
        if self.model.is_empty() {
            return Err("model must be non-empty".into());
        }
        if self.idle_timeout_s == 0 {
            return Err("idle_timeout_s must be positive".into());
        }
        if self.keepalive_interval_s == 0 {
            return Err("keepalive_interval_s must be positive".into());
        }

        let mut names = BTreeSet::new();
        for c in self.containers() {
            if !valid_ident(&c.name) {
                return Err(format!("container name {:?} is invalid", c.name));
            }
            if c.image_or_behavior.is_empty() {
                return Err(format!("container {} has no image_or_behavior", c.name));
            }
            if !names.insert(c.name.as_str()) {
                return Err(format!("duplicate container name {:?}", c.name));
            }
            if let Some(bad) = c.env.keys().find(|k| !valid_env_var(k)) {
                return Err(format!("container {}: invalid env var name {bad:?}", c.name));
            }
        }

        let mut vol_names = BTreeSet::new();
        let mut mounts = BTreeSet::new();
        for v in &self.volumes {
            if !valid_ident(&v.name) {
                return Err(format!("volume name {:?} is invalid", v.name));
            }
            if !vol_names.insert(v.name.as_str()) {
                return Err(format!("duplicate volume name {:?}", v.name));
            }
            if !v.mount_path.starts_with('/') || v.mount_path.len() < 2 {
                return Err(format!("mount path {:?} must be absolute", v.mount_path));
            }
            if v.mount_path.split('/').any(|seg| seg == "..") {
                return Err(format!("mount path {:?} may not contain '..'", v.mount_path));
            }
            if !mounts.insert(v.mount_path.trim_end_matches('/')) {
                return Err(format!("duplicate mount path {:?}", v.mount_path));
            }
        }

        let mut targets = BTreeSet::new();
        for b in &self.secret_bindings {
            if b.secret_name.is_empty() {
                return Err("secret binding with empty secret_name".into());
            }
            if !names.contains(b.target_container.as_str()) {
                return Err(format!(
                    "secret {} bound to undeclared container {:?}",
                    b.secret_name, b.target_container
                ));
            }
            if !valid_env_var(&b.env_var) {
                return Err(format!("invalid env var name {:?}", b.env_var));
            }
            if !targets.insert((b.target_container.as_str(), b.env_var.as_str())) {
                return Err(format!(
                    "env var {} bound twice in container {}",
                    b.env_var, b.target_container
                ));
            }
            let target = self
                .containers()
                .find(|c| c.name == b.target_container)
                .expect("checked above");
            if target.env.contains_key(&b.env_var) {
                return Err(format!(
                    "env var {} in container {} is both static and secret-bound",
                    b.env_var, b.target_container
                ));
            }
        }
        Ok(())
    }
}
