//! The agents service: versioned agent definitions, sealed secrets, and
//! resolution of a definition into a spawn-ready harness.

mod definition;
mod seal;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{Clock, Millis};
use crate::events::{BusError, EventBus, TOPIC_CONFIG_APPLIED};
use crate::store::{Store, StoreError};

pub use definition::{
    AgentDefinition, ContainerSpec, SecretBinding, VolumeSpec, DEFAULT_IDLE_TIMEOUT_S,
    DEFAULT_KEEPALIVE_INTERVAL_S,
};
pub use seal::{SealError, Sealer, MASTER_KEY_ENV};

const AGENT_PREFIX: &str = "agent/";
const REVISION_PREFIX: &str = "agentrev/";
const SECRET_PREFIX: &str = "secret/";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid definition: {0}")]
    Validation(String),
    #[error("agent not found: {0}")]
    NotFound(String),
    #[error("revision {revision} of agent {agent_id} not found")]
    RevisionNotFound { agent_id: String, revision: u64 },
    #[error("secret not found: {0}")]
    SecretNotFound(String),
    #[error("unresolved secret {0:?}")]
    UnresolvedSecret(String),
    #[error("stale write to {target}: expected {expected}, found {actual}")]
    Stale {
        target: String,
        expected: String,
        actual: String,
    },
    #[error(transparent)]
    Seal(#[from] SealError),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// Which revision to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevisionSelector {
    Latest,
    Exact(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AgentHead {
    revision: u64,
    /// `None` once the agent has been deleted; the revision counter survives.
    definition: Option<AgentDefinition>,
}

#[derive(Clone, Serialize, Deserialize)]
struct StoredSecret {
    nonce: String,
    ciphertext: String,
    salt: String,
    digest: String,
    owner_agent: Option<String>,
    updated_ts: Millis,
}

/// Everything a listing may say about a secret. Never the value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretInfo {
    pub name: String,
    pub owner_agent: Option<String>,
    /// Random per-write salt and `sha256(salt || value)`, so a holder of the
    /// expected value can detect drift without the store revealing it.
    pub salt: String,
    pub digest: String,
    pub updated_ts: Millis,
}

impl SecretInfo {
    pub fn matches(&self, value: &[u8]) -> bool {
        hex::decode(&self.salt)
            .map(|salt| salted_digest(&salt, value) == self.digest)
            .unwrap_or(false)
    }
}

pub fn salted_digest(salt: &[u8], value: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(value);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedContainer {
    pub name: String,
    pub behavior: String,
    pub main: bool,
    pub env: BTreeMap<String, String>,
}

/// A definition pinned at one revision with secrets materialized into the
/// env of exactly the containers their bindings target.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedHarness {
    pub agent_id: String,
    pub revision: u64,
    pub system_prompt: String,
    pub model: String,
    pub idle_timeout_s: u64,
    pub keepalive_interval_s: u64,
    pub containers: Vec<ResolvedContainer>,
    pub volumes: Vec<VolumeSpec>,
}

impl std::fmt::Debug for ResolvedHarness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResolvedHarness")
            .field("agent_id", &self.agent_id)
            .field("revision", &self.revision)
            .field(
                "containers",
                &self.containers.iter().map(|c| &c.name).collect::<Vec<_>>(),
            )
            .finish_non_exhaustive()
    }
}

impl ResolvedHarness {
    pub fn container(&self, name: &str) -> Option<&ResolvedContainer> {
        self.containers.iter().find(|c| c.name == name)
    }

    pub fn main(&self) -> &ResolvedContainer {
        self.containers
            .iter()
            .find(|c| c.main)
            .expect("resolved harness always has a main container")
    }
}

pub struct Registry {
    store: Arc<Store>,
    bus: Arc<EventBus>,
    clock: Arc<dyn Clock>,
    sealer: Sealer,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry").finish_non_exhaustive()
    }
}

impl Registry {
    pub fn new(store: Arc<Store>, bus: Arc<EventBus>, clock: Arc<dyn Clock>, sealer: Sealer) -> Self {
        Self {
            store,
            bus,
            clock,
            sealer,
        }
    }

    pub fn put_definition(&self, def: AgentDefinition) -> Result<u64, RegistryError> {
        self.put_definition_expecting(def, None)
    }

    /// Stores `def` as the next revision. With `expected_latest` set the write
    /// only lands if the current latest revision equals it (0 meaning the
    /// agent must not currently exist).
    pub fn put_definition_expecting(
        &self,
        mut def: AgentDefinition,
        expected_latest: Option<u64>,
    ) -> Result<u64, RegistryError> {
        def.validate().map_err(RegistryError::Validation)?;
        let key = head_key(&def.agent_id);
        let revision = loop {
            let (head, version) = match self.store.get_json::<AgentHead>(&key)? {
                Some((h, v)) => (Some(h), v),
                None => (None, 0),
            };
            let current_live = head
                .as_ref()
                .filter(|h| h.definition.is_some())
                .map_or(0, |h| h.revision);
            if let Some(expected) = expected_latest {
                if expected != current_live {
                    return Err(RegistryError::Stale {
                        target: format!("agent {}", def.agent_id),
                        expected: expected.to_string(),
                        actual: current_live.to_string(),
                    });
                }
            }
            // archive the outgoing head first so every revision below the
            // head is always readable
            if let Some(AgentHead {
                revision,
                definition: Some(old),
            }) = &head
            {
                self.store
                    .put_json(&revision_key(&def.agent_id, *revision), old, None)?;
            }
            let next = head.as_ref().map_or(0, |h| h.revision) + 1;
            def.revision = next;
            let new_head = AgentHead {
                revision: next,
                definition: Some(def.clone()),
            };
            match self.store.put_json(&key, &new_head, Some(version)) {
                Ok(_) => break next,
                Err(e) if e.is_conflict() => continue,
                Err(e) => return Err(e.into()),
            }
        };
        self.bus.publish(
            TOPIC_CONFIG_APPLIED,
            json!({"kind": "agent", "action": "put", "agent_id": def.agent_id, "revision": revision}),
        )?;
        Ok(revision)
    }

    pub fn get_definition(
        &self,
        agent_id: &str,
        selector: RevisionSelector,
    ) -> Result<AgentDefinition, RegistryError> {
        let head = self
            .store
            .get_json::<AgentHead>(&head_key(agent_id))?
            .map(|(h, _)| h)
            .ok_or_else(|| RegistryError::NotFound(agent_id.to_string()))?;
        match selector {
            RevisionSelector::Latest => head
                .definition
                .ok_or_else(|| RegistryError::NotFound(agent_id.to_string())),
            RevisionSelector::Exact(rev) => {
                if rev == head.revision {
                    if let Some(def) = head.definition {
                        return Ok(def);
                    }
                }
                self.store
                    .get_json::<AgentDefinition>(&revision_key(agent_id, rev))?
                    .map(|(d, _)| d)
                    .ok_or_else(|| RegistryError::RevisionNotFound {
                        agent_id: agent_id.to_string(),
                        revision: rev,
                    })
            }
        }
    }

    /// Latest definition of every live agent, by agent id.
    pub fn list_definitions(&self) -> Result<Vec<AgentDefinition>, RegistryError> {
        Ok(self
            .store
            .scan_json::<AgentHead>(AGENT_PREFIX)?
            .into_iter()
            .filter_map(|(_, h, _)| h.definition)
            .collect())
    }

    /// Removes an agent. Running instances keep their pinned harness; the
    /// revision counter is kept so a re-created agent continues numbering.
    pub fn delete_definition(
        &self,
        agent_id: &str,
        expected_latest: Option<u64>,
    ) -> Result<u64, RegistryError> {
        let key = head_key(agent_id);
        let revision = loop {
            let Some((head, version)) = self.store.get_json::<AgentHead>(&key)? else {
                return Err(RegistryError::NotFound(agent_id.to_string()));
            };
            let Some(def) = head.definition else {
                return Err(RegistryError::NotFound(agent_id.to_string()));
            };
            if let Some(expected) = expected_latest {
                if expected != head.revision {
                    return Err(RegistryError::Stale {
                        target: format!("agent {agent_id}"),
                        expected: expected.to_string(),
                        actual: head.revision.to_string(),
                    });
                }
            }
            self.store
                .put_json(&revision_key(agent_id, head.revision), &def, None)?;
            let tomb = AgentHead {
                revision: head.revision,
                definition: None,
            };
            match self.store.put_json(&key, &tomb, Some(version)) {
                Ok(_) => break head.revision,
                Err(e) if e.is_conflict() => continue,
                Err(e) => return Err(e.into()),
            }
        };
        self.bus.publish(
            TOPIC_CONFIG_APPLIED,
            json!({"kind": "agent", "action": "delete", "agent_id": agent_id, "revision": revision}),
        )?;
        Ok(revision)
    }

    pub fn put_secret(
        &self,
        name: &str,
        value: &[u8],
        owner_agent: Option<&str>,
    ) -> Result<(), RegistryError> {
        self.put_secret_expecting(name, value, owner_agent, None)
    }

    /// Seals and stores a secret. `expected_digest` guards against concurrent
    /// edits: `Some(None)` requires the secret to be absent, `Some(Some(d))`
    /// requires the current digest to be `d`.
    pub fn put_secret_expecting(
        &self,
        name: &str,
        value: &[u8],
        owner_agent: Option<&str>,
        expected_digest: Option<Option<&str>>,
    ) -> Result<(), RegistryError> {
        validate_secret_name(name)?;
        let key = secret_key(name);
        let (current, version) = match self.store.get_json::<StoredSecret>(&key)? {
            Some((s, v)) => (Some(s), v),
            None => (None, 0),
        };
        if let Some(expected) = expected_digest {
            let actual = current.as_ref().map(|s| s.digest.as_str());
            if expected != actual {
                return Err(RegistryError::Stale {
                    target: format!("secret {name}"),
                    expected: expected.unwrap_or("(absent)").to_string(),
                    actual: actual.unwrap_or("(absent)").to_string(),
                });
            }
        }
        let (nonce, ciphertext) = self.sealer.seal(name, value)?;
        let salt: [u8; 16] = rand::random();
        let owner = owner_agent
            .map(str::to_string)
            .or_else(|| current.as_ref().and_then(|s| s.owner_agent.clone()));
        let stored = StoredSecret {
            nonce: hex::encode(nonce),
            ciphertext: hex::encode(ciphertext),
            salt: hex::encode(salt),
            digest: salted_digest(&salt, value),
            owner_agent: owner,
            updated_ts: self.clock.now_ms(),
        };
        match self.store.put_json(&key, &stored, Some(version)) {
            Ok(_) => {}
            Err(e) if e.is_conflict() => {
                return Err(RegistryError::Stale {
                    target: format!("secret {name}"),
                    expected: format!("version {version}"),
                    actual: "concurrent write".into(),
                })
            }
            Err(e) => return Err(e.into()),
        }
        self.bus.publish(
            TOPIC_CONFIG_APPLIED,
            json!({"kind": "secret", "action": "put", "name": name}),
        )?;
        Ok(())
    }

    pub fn delete_secret(&self, name: &str, expected_digest: Option<&str>) -> Result<(), RegistryError> {
        let key = secret_key(name);
        let Some((current, version)) = self.store.get_json::<StoredSecret>(&key)? else {
            return Err(RegistryError::SecretNotFound(name.to_string()));
        };
        if let Some(expected) = expected_digest {
            if expected != current.digest {
                return Err(RegistryError::Stale {
                    target: format!("secret {name}"),
                    expected: expected.to_string(),
                    actual: current.digest,
                });
            }
        }
        self.store.delete(&key, version)?;
        self.bus.publish(
            TOPIC_CONFIG_APPLIED,
            json!({"kind": "secret", "action": "delete", "name": name}),
        )?;
        Ok(())
    }

    pub fn secret_info(&self, name: &str) -> Result<Option<SecretInfo>, RegistryError> {
        Ok(self
            .store
            .get_json::<StoredSecret>(&secret_key(name))?
            .map(|(s, _)| info_of(name, s)))
    }

    pub fn list_secrets(&self) -> Result<Vec<SecretInfo>, RegistryError> {
        Ok(self
            .store
            .scan_json::<StoredSecret>(SECRET_PREFIX)?
            .into_iter()
            .map(|(key, s, _)| info_of(&key[SECRET_PREFIX.len()..], s))
            .collect())
    }

    fn open_secret(&self, name: &str) -> Result<Vec<u8>, RegistryError> {
        let (s, _) = self
            .store
            .get_json::<StoredSecret>(&secret_key(name))?
            .ok_or_else(|| RegistryError::UnresolvedSecret(name.to_string()))?;
        let nonce = hex::decode(&s.nonce).map_err(|_| SealError::Malformed)?;
        let ct = hex::decode(&s.ciphertext).map_err(|_| SealError::Malformed)?;
        Ok(self.sealer.open(name, &nonce, &ct)?)
    }

    /// Pins the latest revision of `agent_id` and materializes its secrets.
    pub fn resolve_harness(&self, agent_id: &str) -> Result<ResolvedHarness, RegistryError> {
        let def = self.get_definition(agent_id, RevisionSelector::Latest)?;
        self.resolve_definition(&def)
    }

    pub fn resolve_definition(&self, def: &AgentDefinition) -> Result<ResolvedHarness, RegistryError> {
        let mut containers: Vec<ResolvedContainer> = std::iter::once((&def.main_container, true))
            .chain(def.sidecars.iter().map(|c| (c, false)))
            .map(|(c, main)| ResolvedContainer {
                name: c.name.clone(),
                behavior: c.image_or_behavior.clone(),
                main,
                env: c.env.clone(),
            })
            .collect();
        for binding in &def.secret_bindings {
            let value = self.open_secret(&binding.secret_name)?;
            let value = String::from_utf8(value).map_err(|_| {
                RegistryError::Validation(format!(
                    "secret {} is not valid UTF-8 and cannot be placed in an env var",
                    binding.secret_name
                ))
            })?;
            let target = containers
                .iter_mut()
                .find(|c| c.name == binding.target_container)
                .ok_or_else(|| {
                    RegistryError::Validation(format!(
                        "binding targets unknown container {}",
                        binding.target_container
                    ))
                })?;
            target.env.insert(binding.env_var.clone(), value);
        }
        Ok(ResolvedHarness {
            agent_id: def.agent_id.clone(),
            revision: def.revision,
            system_prompt: def.system_prompt.clone(),
            model: def.model.clone(),
            idle_timeout_s: def.idle_timeout_s,
            keepalive_interval_s: def.keepalive_interval_s,
            containers,
            volumes: def.volumes.clone(),
        })
    }
}

fn info_of(name: &str, s: StoredSecret) -> SecretInfo {
    SecretInfo {
        name: name.to_string(),
        owner_agent: s.owner_agent,
        salt: s.salt,
        digest: s.digest,
        updated_ts: s.updated_ts,
    }
}

fn validate_secret_name(name: &str) -> Result<(), RegistryError> {
    if name.is_empty() {
        return Err(RegistryError::Validation("secret name must be non-empty".into()));
    }
    if name.contains('/') || name.chars().any(char::is_whitespace) {
        return Err(RegistryError::Validation(format!(
            "secret name {name:?} may not contain '/' or whitespace"
        )));
    }
    Ok(())
}

fn head_key(agent_id: &str) -> String {
    format!("{AGENT_PREFIX}{agent_id}")
}

fn revision_key(agent_id: &str, rev: u64) -> String {
    format!("{REVISION_PREFIX}{agent_id}/{rev:010}")
}

fn secret_key(name: &str) -> String {
    format!("{SECRET_PREFIX}{name}")
}
