//! Definitions as code: parse agent/secret/module files, plan against the
//! live registry, apply through the gateway.
//!
//! A definition file:
//!
//! ```json
//! {
//!   "modules": {
//!     "mcp-db": {
//!       "sidecars": [{"name": "db", "image_or_behavior": "mock-mcp"}],
//!       "secret_bindings": [{"secret_name": "db-pass", "target_container": "db", "env_var": "DB_PASS"}]
//!     }
//!   },
//!   "agents": {
//!     "support": {
//!       "system_prompt": "be brief",
//!       "model": "m1",
//!       "main_container": {"name": "main", "image_or_behavior": "echo-agent"},
//!       "use_modules": ["mcp-db"]
//!     }
//!   },
//!   "secrets": {
//!     "db-pass": {"env": "DB_PASS", "owner_agent": "support"},
//!     "literal": "inline value"
//!   }
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::gateway::{Api, ApiResponse, ClientError, DIGEST_ABSENT, HEADER_EXPECTED_DIGEST, HEADER_EXPECTED_REVISION};
use crate::registry::{AgentDefinition, ContainerSpec, SecretBinding, SecretInfo, VolumeSpec};

pub const SENSITIVE: &str = "(sensitive)";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{source_name}:{line}:{column}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("agent {agent} uses undeclared module {module:?}")]
    UnknownModule { agent: String, module: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("gateway {status} {code}: {message}")]
    Gateway {
        status: u16,
        code: String,
        message: String,
    },
}

fn gateway_err(r: &ApiResponse) -> ConfigError {
    ConfigError::Gateway {
        status: r.status,
        code: r.code().unwrap_or("").to_string(),
        message: r.body["message"].as_str().unwrap_or_default().to_string(),
    }
}

/// One definition file's text.
#[derive(Debug, Clone)]
pub struct Document {
    pub source: String,
    pub text: String,
}

impl Document {
    pub fn new(source: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            text: text.into(),
        }
    }
}

/// Reads a single file, or every `*.json` directly under a directory in
/// name order.
pub fn load_path(path: impl AsRef<Path>) -> Result<Vec<Document>, ConfigError> {
    let path = path.as_ref();
    let io = |e| ConfigError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path).map_err(io)? {
            let p = entry.map_err(io)?.path();
            if p.extension().is_some_and(|e| e == "json") && p.is_file() {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    files
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).map_err(|e| ConfigError::Io {
                path: p.clone(),
                source: e,
            })?;
            Ok(Document::new(p.display().to_string(), text))
        })
        .collect()
}

/// Secret material held in memory. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretValue(String);

impl SecretValue {
    pub fn new(v: impl Into<String>) -> Self {
        Self(v.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Debug for SecretValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(SENSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesiredSecret {
    pub value: SecretValue,
    /// `None` leaves ownership as it is.
    pub owner_agent: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesiredState {
    pub agents: BTreeMap<String, AgentDefinition>,
    pub secrets: BTreeMap<String, DesiredSecret>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Module {
    #[serde(default)]
    pub sidecars: Vec<ContainerSpec>,
    #[serde(default)]
    pub secret_bindings: Vec<SecretBinding>,
    #[serde(default)]
    pub volumes: Vec<VolumeSpec>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SecretSource {
    Literal(String),
    Value {
        value: String,
        #[serde(default)]
        owner_agent: Option<String>,
    },
    Env {
        env: String,
        #[serde(default)]
        owner_agent: Option<String>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileDoc {
    #[serde(default)]
    modules: BTreeMap<String, Module>,
    #[serde(default)]
    agents: BTreeMap<String, Map<String, Value>>,
    #[serde(default)]
    secrets: BTreeMap<String, SecretSource>,
}

/// Parses and expands documents. `{"env": VAR}` secrets are read from the
/// process environment.
pub fn parse(docs: &[Document]) -> Result<DesiredState, ConfigError> {
    parse_with_env(docs, |k| std::env::var(k).ok())
}

pub fn parse_with_env(
    docs: &[Document],
    env: impl Fn(&str) -> Option<String>,
) -> Result<DesiredState, ConfigError> {
    let mut modules: BTreeMap<String, Module> = BTreeMap::new();
    let mut raw_agents: BTreeMap<String, (String, Map<String, Value>)> = BTreeMap::new();
    let mut secrets = BTreeMap::new();
    for d in docs {
        let f: FileDoc = serde_json::from_str(&d.text).map_err(|e| ConfigError::Parse {
            source_name: d.source.clone(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        for (name, m) in f.modules {
            if modules.insert(name.clone(), m).is_some() {
                return Err(ConfigError::Schema(format!("module {name} declared twice")));
            }
        }
        for (id, doc) in f.agents {
            if let Some((first, _)) = raw_agents.get(&id) {
                return Err(ConfigError::Schema(format!(
                    "agent {id} declared in both {first} and {}",
                    d.source
                )));
            }
            raw_agents.insert(id, (d.source.clone(), doc));
        }
        for (name, s) in f.secrets {
            let (value, owner_agent) = match s {
                SecretSource::Literal(v) => (v, None),
                SecretSource::Value { value, owner_agent } => (value, owner_agent),
                SecretSource::Env { env: var, owner_agent } => {
                    let v = env(&var).ok_or_else(|| {
                        ConfigError::Schema(format!("secret {name}: environment variable {var} is unset"))
                    })?;
                    (v, owner_agent)
                }
            };
            let ds = DesiredSecret {
                value: SecretValue(value),
                owner_agent,
            };
            if secrets.insert(name.clone(), ds).is_some() {
                return Err(ConfigError::Schema(format!("secret {name} declared twice")));
            }
        }
    }

    let mut agents = BTreeMap::new();
    for (id, (source, mut doc)) in raw_agents {
        let uses: Vec<String> = match doc.remove("use_modules") {
            None => vec![],
            Some(v) => serde_json::from_value(v).map_err(|e| {
                ConfigError::Schema(format!("{source}: agent {id}: use_modules: {e}"))
            })?,
        };
        match doc.get("agent_id") {
            Some(Value::String(s)) if s != &id => {
                return Err(ConfigError::Schema(format!(
                    "{source}: agent key {id} does not match agent_id {s}"
                )))
            }
            _ => {}
        }
        doc.insert("agent_id".into(), json!(id));
        doc.remove("revision");
        let mut def: AgentDefinition = serde_json::from_value(Value::Object(doc))
            .map_err(|e| ConfigError::Schema(format!("{source}: agent {id}: {e}")))?;
        for m in &uses {
            let module = modules.get(m).ok_or_else(|| ConfigError::UnknownModule {
                agent: id.clone(),
                module: m.clone(),
            })?;
            def.sidecars.extend(module.sidecars.iter().cloned());
            def.secret_bindings.extend(module.secret_bindings.iter().cloned());
            def.volumes.extend(module.volumes.iter().cloned());
        }
        def.validate()
            .map_err(|e| ConfigError::Schema(format!("{source}: agent {id}: {e}")))?;
        agents.insert(id, def);
    }
    Ok(DesiredState { agents, secrets })
}

/// A secret as a listing reports it. Salt and digest are admin-only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveSecret {
    pub name: String,
    #[serde(default)]
    pub owner_agent: Option<String>,
    #[serde(default)]
    pub salt: Option<String>,
    #[serde(default)]
    pub digest: Option<String>,
}

impl LiveSecret {
    /// `None` when the listing withheld the digest.
    fn holds(&self, value: &SecretValue) -> Option<bool> {
        let (salt, digest) = (self.salt.clone()?, self.digest.clone()?);
        let info = SecretInfo {
            name: self.name.clone(),
            owner_agent: self.owner_agent.clone(),
            salt,
            digest,
            updated_ts: 0,
        };
        Some(info.matches(value.expose().as_bytes()))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LiveState {
    pub agents: BTreeMap<String, AgentDefinition>,
    pub secrets: BTreeMap<String, LiveSecret>,
}

pub fn fetch_live(api: &dyn Api) -> Result<LiveState, ConfigError> {
    let r = api.get("/agents")?;
    if !r.is_success() {
        return Err(gateway_err(&r));
    }
    let defs: Vec<AgentDefinition> = serde_json::from_value(r.body["agents"].clone())
        .map_err(|e| ConfigError::Schema(format!("agent listing: {e}")))?;
    let r = api.get("/secrets")?;
    if !r.is_success() {
        return Err(gateway_err(&r));
    }
    let secrets: Vec<LiveSecret> = serde_json::from_value(r.body["secrets"].clone())
        .map_err(|e| ConfigError::Schema(format!("secret listing: {e}")))?;
    Ok(LiveState {
        agents: defs.into_iter().map(|d| (d.agent_id.clone(), d)).collect(),
        secrets: secrets.into_iter().map(|s| (s.name.clone(), s)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Create,
    Update,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Agent,
    Secret,
}

/// Live version an action was planned against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stamp {
    /// Latest agent revision; 0 means absent.
    Revision(u64),
    /// Secret digest, or `absent`.
    Digest(String),
    /// The caller may not see the secret's digest.
    Unchecked,
}

impl std::fmt::Display for Stamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stamp::Revision(r) => write!(f, "rev {r}"),
            Stamp::Digest(d) if d == DIGEST_ABSENT => f.write_str("absent"),
            Stamp::Digest(d) => write!(f, "digest {}", &d[..d.len().min(12)]),
            Stamp::Unchecked => f.write_str("unchecked"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDiff {
    pub field: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub before: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub after: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub resource: ResourceKind,
    pub name: String,
    pub stamp: Stamp,
    pub diffs: Vec<FieldDiff>,
    /// A delete that needs `allow_delete`.
    pub blocked: bool,
    #[serde(skip)]
    definition: Option<AgentDefinition>,
    #[serde(skip)]
    secret: Option<DesiredSecret>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PlanOptions {
    pub allow_delete: bool,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&p, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn canonical(def: &AgentDefinition) -> Value {
    let mut d = def.clone();
    d.revision = 0;
    serde_json::to_value(d).unwrap_or(Value::Null)
}

/// Leaf-level differences between two agent documents. Arrays compare whole.
fn diff_definitions(before: Option<&AgentDefinition>, after: Option<&AgentDefinition>) -> Vec<FieldDiff> {
    let mut b = BTreeMap::new();
    let mut a = BTreeMap::new();
    if let Some(d) = before {
        flatten("", &canonical(d), &mut b);
    }
    if let Some(d) = after {
        flatten("", &canonical(d), &mut a);
    }
    b.remove("agent_id");
    a.remove("agent_id");
    let keys: BTreeSet<&String> = b.keys().chain(a.keys()).collect();
    keys.into_iter()
        .filter(|k| b.get(*k) != a.get(*k))
        .map(|k| FieldDiff {
            field: k.clone(),
            before: b.get(k).cloned(),
            after: a.get(k).cloned(),
        })
        .collect()
}

fn sensitive() -> Option<Value> {
    Some(json!(SENSITIVE))
}

/// Minimal action list taking `live` to `desired`. Order: agent
/// creates/updates, secret creates/updates, secret deletes, agent deletes.
pub fn plan(desired: &DesiredState, live: &LiveState, opts: PlanOptions) -> Plan {
    let mut agent_puts = Vec::new();
    let mut agent_dels = Vec::new();
    for (id, want) in &desired.agents {
        let have = live.agents.get(id);
        let diffs = diff_definitions(have, Some(want));
        if diffs.is_empty() {
            continue;
        }
        agent_puts.push(Action {
            kind: if have.is_some() { ActionKind::Update } else { ActionKind::Create },
            resource: ResourceKind::Agent,
            name: id.clone(),
            stamp: Stamp::Revision(have.map_or(0, |h| h.revision)),
            diffs,
            blocked: false,
            definition: Some(want.clone()),
            secret: None,
        });
    }
    for (id, have) in &live.agents {
        if !desired.agents.contains_key(id) {
            agent_dels.push(Action {
                kind: ActionKind::Delete,
                resource: ResourceKind::Agent,
                name: id.clone(),
                stamp: Stamp::Revision(have.revision),
                diffs: diff_definitions(Some(have), None),
                blocked: !opts.allow_delete,
                definition: None,
                secret: None,
            });
        }
    }

    let mut secret_puts = Vec::new();
    let mut secret_dels = Vec::new();
    for (name, want) in &desired.secrets {
        let have = live.secrets.get(name);
        let mut diffs = Vec::new();
        let stamp = match have {
            None => {
                diffs.push(FieldDiff {
                    field: "value".into(),
                    before: None,
                    after: sensitive(),
                });
                if let Some(o) = &want.owner_agent {
                    diffs.push(FieldDiff {
                        field: "owner_agent".into(),
                        before: None,
                        after: Some(json!(o)),
                    });
                }
                Stamp::Digest(DIGEST_ABSENT.into())
            }
            Some(h) => {
                if h.holds(&want.value) == Some(false) {
                    diffs.push(FieldDiff {
                        field: "value".into(),
                        before: sensitive(),
                        after: sensitive(),
                    });
                }
                if want.owner_agent.is_some() && want.owner_agent != h.owner_agent {
                    diffs.push(FieldDiff {
                        field: "owner_agent".into(),
                        before: h.owner_agent.as_ref().map(|o| json!(o)),
                        after: want.owner_agent.as_ref().map(|o| json!(o)),
                    });
                }
                h.digest.clone().map_or(Stamp::Unchecked, Stamp::Digest)
            }
        };
        if diffs.is_empty() {
            continue;
        }
        secret_puts.push(Action {
            kind: if have.is_some() { ActionKind::Update } else { ActionKind::Create },
            resource: ResourceKind::Secret,
            name: name.clone(),
            stamp,
            diffs,
            blocked: false,
            definition: None,
            secret: Some(want.clone()),
        });
    }
    for (name, have) in &live.secrets {
        if !desired.secrets.contains_key(name) {
            let mut diffs = vec![FieldDiff {
                field: "value".into(),
                before: sensitive(),
                after: None,
            }];
            if let Some(o) = &have.owner_agent {
                diffs.push(FieldDiff {
                    field: "owner_agent".into(),
                    before: Some(json!(o)),
                    after: None,
                });
            }
            secret_dels.push(Action {
                kind: ActionKind::Delete,
                resource: ResourceKind::Secret,
                name: name.clone(),
                stamp: have.digest.clone().map_or(Stamp::Unchecked, Stamp::Digest),
                diffs,
                blocked: !opts.allow_delete,
                definition: None,
                secret: None,
            });
        }
    }

    let mut actions = agent_puts;
    actions.extend(secret_puts);
    actions.extend(secret_dels);
    actions.extend(agent_dels);
    Plan { actions }
}

fn render_value(v: &Option<Value>) -> String {
    match v {
        None => "(none)".into(),
        Some(v) => v.to_string(),
    }
}

impl Plan {
    /// No drift at all, blocked deletes included.
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn count(&self, kind: ActionKind) -> usize {
        self.actions.iter().filter(|a| a.kind == kind).count()
    }

    pub fn blocked(&self) -> usize {
        self.actions.iter().filter(|a| a.blocked).count()
    }

    pub fn render_human(&self) -> String {
        if self.is_empty() {
            return "No changes. Live state matches the definitions.\n".into();
        }
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:<7} {:<24} {:<20} CHANGE", "ACTION", "KIND", "NAME", "STAMP");
        for a in &self.actions {
            let kind = match a.kind {
                ActionKind::Create => "create",
                ActionKind::Update => "update",
                ActionKind::Delete if a.blocked => "blocked",
                ActionKind::Delete => "delete",
            };
            let res = match a.resource {
                ResourceKind::Agent => "agent",
                ResourceKind::Secret => "secret",
            };
            let mut first = true;
            for d in &a.diffs {
                let change = format!("{}: {} -> {}", d.field, render_value(&d.before), render_value(&d.after));
                if first {
                    let _ = writeln!(out, "{kind:<8} {res:<7} {:<24} {:<20} {change}", a.name, a.stamp.to_string());
                    first = false;
                } else {
                    let _ = writeln!(out, "{:<8} {:<7} {:<24} {:<20} {change}", "", "", "", "");
                }
            }
        }
        let _ = writeln!(
            out,
            "\nPlan: {} to create, {} to update, {} to delete.",
            self.count(ActionKind::Create),
            self.count(ActionKind::Update),
            self.count(ActionKind::Delete) - self.blocked(),
        );
        if self.blocked() > 0 {
            let _ = writeln!(out, "{} delete(s) blocked; pass --allow-delete to include them.", self.blocked());
        }
        out
    }

    pub fn to_json(&self) -> Value {
        json!({
            "actions": self.actions,
            "summary": {
                "create": self.count(ActionKind::Create),
                "update": self.count(ActionKind::Update),
                "delete": self.count(ActionKind::Delete) - self.blocked(),
                "blocked": self.blocked(),
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Applied,
    Blocked,
    Failed,
    NotAttempted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub kind: ActionKind,
    pub resource: ResourceKind,
    pub name: String,
    pub status: OutcomeStatus,
    /// New agent revision, for agent writes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub revision: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ApplyError {
    /// Live state moved since the plan was computed.
    StalePlan { target: String, message: String },
    Gateway { target: String, status: u16, code: String, message: String },
    Transport { target: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub outcomes: Vec<ActionOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ApplyError>,
}

impl ApplyReport {
    pub fn is_success(&self) -> bool {
        self.error.is_none()
    }

    pub fn is_stale(&self) -> bool {
        matches!(self.error, Some(ApplyError::StalePlan { .. }))
    }

    pub fn applied(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.status == OutcomeStatus::Applied)
            .count()
    }

    pub fn render_human(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            let status = match o.status {
                OutcomeStatus::Applied => "applied",
                OutcomeStatus::Blocked => "blocked",
                OutcomeStatus::Failed => "FAILED",
                OutcomeStatus::NotAttempted => "not attempted",
            };
            let _ = write!(out, "{:?} {:?} {}: {status}", o.kind, o.resource, o.name);
            if let Some(r) = o.revision {
                let _ = write!(out, " (revision {r})");
            }
            if let Some(e) = &o.error {
                let _ = write!(out, " - {e}");
            }
            out.push('\n');
        }
        match &self.error {
            None => {
                let _ = writeln!(out, "Apply complete: {} action(s) applied.", self.applied());
            }
            Some(ApplyError::StalePlan { target, .. }) => {
                let _ = writeln!(out, "Apply halted: stale plan at {target}; re-run plan.");
            }
            Some(ApplyError::Gateway { target, status, .. }) => {
                let _ = writeln!(out, "Apply halted at {target}: gateway returned {status}.");
            }
            Some(ApplyError::Transport { target, message }) => {
                let _ = writeln!(out, "Apply halted at {target}: {message}");
            }
        }
        out
    }
}

fn send(api: &dyn Api, a: &Action) -> Result<ApiResponse, ClientError> {
    let stamp_header = |h: &'static str, v: String| vec![(h, v)];
    let headers: Vec<(&str, String)> = match &a.stamp {
        Stamp::Revision(r) => stamp_header(HEADER_EXPECTED_REVISION, r.to_string()),
        Stamp::Digest(d) => stamp_header(HEADER_EXPECTED_DIGEST, d.clone()),
        Stamp::Unchecked => vec![],
    };
    let hdrs: Vec<(&str, &str)> = headers.iter().map(|(k, v)| (*k, v.as_str())).collect();
    match (a.resource, a.kind) {
        (ResourceKind::Agent, ActionKind::Delete) => {
            api.call("DELETE", &format!("/agents/{}", a.name), None, &hdrs)
        }
        (ResourceKind::Agent, _) => {
            let body = a.definition.as_ref().map(canonical).unwrap_or(Value::Null);
            api.call("PUT", &format!("/agents/{}", a.name), Some(&body), &hdrs)
        }
        (ResourceKind::Secret, ActionKind::Delete) => {
            api.call("DELETE", &format!("/secrets/{}", a.name), None, &hdrs)
        }
        (ResourceKind::Secret, _) => {
            let s = a.secret.as_ref();
            let mut body = json!({
                "name": a.name,
                "value": s.map(|s| s.value.expose()).unwrap_or_default(),
            });
            if let Some(o) = s.and_then(|s| s.owner_agent.as_ref()) {
                body["owner_agent"] = json!(o);
            }
            api.call("POST", "/secrets", Some(&body), &hdrs)
        }
    }
}

/// Executes the plan in order, halting at the first failure. Every write
/// carries its stamp, so a plan whose live state moved is rejected.
pub fn apply(api: &dyn Api, plan: &Plan) -> ApplyReport {
    let mut report = ApplyReport::default();
    for a in &plan.actions {
        let mut outcome = ActionOutcome {
            kind: a.kind,
            resource: a.resource,
            name: a.name.clone(),
            status: OutcomeStatus::NotAttempted,
            revision: None,
            error: None,
        };
        if report.error.is_some() {
            report.outcomes.push(outcome);
            continue;
        }
        if a.blocked {
            outcome.status = OutcomeStatus::Blocked;
            report.outcomes.push(outcome);
            continue;
        }
        let target = format!(
            "{} {}",
            match a.resource {
                ResourceKind::Agent => "agent",
                ResourceKind::Secret => "secret",
            },
            a.name
        );
        match send(api, a) {
            Ok(r) if r.is_success() => {
                outcome.status = OutcomeStatus::Applied;
                outcome.revision = r.body["revision"].as_u64();
            }
            Ok(r) => {
                let message = r.body["message"].as_str().unwrap_or_default().to_string();
                outcome.status = OutcomeStatus::Failed;
                outcome.error = Some(format!("{} {}", r.status, message));
                report.error = Some(if r.status == 409 {
                    ApplyError::StalePlan { target, message }
                } else {
                    ApplyError::Gateway {
                        target,
                        status: r.status,
                        code: r.code().unwrap_or("").to_string(),
                        message,
                    }
                });
            }
            Err(e) => {
                outcome.status = OutcomeStatus::Failed;
                outcome.error = Some(e.to_string());
                report.error = Some(ApplyError::Transport {
                    target,
                    message: e.to_string(),
                });
            }
        }
        report.outcomes.push(outcome);
    }
    report
}

#[cfg(test)]
mod tests;
