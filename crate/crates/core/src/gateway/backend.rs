//! Internal services behind the gateway. They learn the caller only from
//! the `X-Agyn-Identity` header the gateway stamps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    ApiResponse, Principal, Route, UserTable, DIGEST_ABSENT, HEADER_EXPECTED_DIGEST,
    HEADER_EXPECTED_REVISION, HEADER_IDENTITY,
};
use crate::authz::{AuthzError, DialPolicy, ObjectRef, RelationTuple, Subject};
use crate::identity::IdentityError;
use crate::orchestrator::{self, OrchestratorError};
use crate::platform::Services;
use crate::registry::{AgentDefinition, RegistryError, RevisionSelector};
use crate::threads::ThreadError;

/// An accepted call, as the gateway forwards it.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalRequest {
    pub route: Route,
    pub query: BTreeMap<String, String>,
    /// Always contains `x-agyn-identity`.
    pub headers: BTreeMap<String, String>,
    pub body: Value,
}

impl InternalRequest {
    pub fn caller(&self) -> &str {
        self.headers.get(HEADER_IDENTITY).map_or("", String::as_str)
    }
}

pub trait Backend: Send + Sync {
    fn handle(&self, req: &InternalRequest) -> ApiResponse;
}

/// A dial target.
pub trait InternalService: Send + Sync {
    fn call(&self, req: &InternalRequest) -> ApiResponse;
}

/// Default dial target: reports who called and what was sent.
#[derive(Debug, Default)]
pub struct EchoService;

impl InternalService for EchoService {
    fn call(&self, req: &InternalRequest) -> ApiResponse {
        let service = match &req.route {
            Route::Dial(s) => s.as_str(),
            _ => "",
        };
        ApiResponse::ok(json!({
            "service": service,
            "caller": req.caller(),
            "body": req.body,
        }))
    }
}

pub struct PlatformBackend {
    services: Arc<Services>,
    users: UserTable,
    dial_targets: RwLock<HashMap<String, Arc<dyn InternalService>>>,
}

impl std::fmt::Debug for PlatformBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlatformBackend").finish_non_exhaustive()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiResponse {
    ApiResponse::error(500, "internal", e.to_string())
}

fn registry_err(e: RegistryError) -> ApiResponse {
    match e {
        RegistryError::Validation(m) => ApiResponse::error(400, "validation", m),
        e @ (RegistryError::NotFound(_)
        | RegistryError::RevisionNotFound { .. }
        | RegistryError::SecretNotFound(_)) => ApiResponse::not_found(e.to_string()),
        e @ RegistryError::UnresolvedSecret(_) => ApiResponse::error(400, "unresolved_secret", e.to_string()),
        e @ RegistryError::Stale { .. } => ApiResponse::error(409, "stale_plan", e.to_string()),
        e => internal(e),
    }
}

fn thread_err(e: ThreadError) -> ApiResponse {
    match e {
        e @ ThreadError::NotFound(_) => ApiResponse::not_found(e.to_string()),
        ThreadError::Invalid(m) => ApiResponse::bad_request(m),
        e => internal(e),
    }
}

fn authz_err(e: AuthzError) -> ApiResponse {
    match e {
        e @ (AuthzError::SchemaViolation(_) | AuthzError::Parse(_) | AuthzError::InvalidPolicy(_)) => {
            ApiResponse::error(400, "schema", e.to_string())
        }
        e @ AuthzError::PolicyNotFound(_) => ApiResponse::not_found(e.to_string()),
        e @ AuthzError::DepthExceeded(_) => ApiResponse::error(422, "depth_exceeded", e.to_string()),
        e => internal(e),
    }
}

fn identity_err(e: IdentityError) -> ApiResponse {
    match e {
        e @ IdentityError::NotFound(_) => ApiResponse::not_found(e.to_string()),
        e @ IdentityError::LeaseGone(_) => ApiResponse::error(410, "lease_gone", e.to_string()),
        e @ IdentityError::InvalidTtl => ApiResponse::bad_request(e.to_string()),
        e => internal(e),
    }
}

fn orch_err(e: OrchestratorError) -> ApiResponse {
    match e {
        e @ OrchestratorError::UnknownInstance(_) => ApiResponse::not_found(e.to_string()),
        e @ OrchestratorError::WrongState { .. } => ApiResponse::error(409, "wrong_state", e.to_string()),
        e => internal(e),
    }
}

fn json_of<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn expected_revision(req: &InternalRequest) -> Result<Option<u64>, ApiResponse> {
    req.headers
        .get(HEADER_EXPECTED_REVISION)
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| ApiResponse::bad_request("expected revision must be an integer"))
        })
        .transpose()
}

impl PlatformBackend {
    pub fn new(services: Arc<Services>, users: UserTable) -> Self {
        Self {
            services,
            users,
            dial_targets: RwLock::new(HashMap::new()),
        }
    }

    pub fn register_service(&self, name: &str, service: Arc<dyn InternalService>) {
        self.dial_targets.write().insert(name.to_string(), service);
    }

    fn caller(&self, req: &InternalRequest) -> Result<Principal, ApiResponse> {
        let h = req.caller();
        if let Some(name) = h.strip_prefix("user:") {
            return self
                .users
                .by_name(name)
                .map(Principal::User)
                .ok_or_else(|| ApiResponse::unauthenticated("unknown caller"));
        }
        match self.services.identity.get(h) {
            Ok(Some(i)) => Ok(Principal::Identity(i)),
            Ok(None) => Err(ApiResponse::unauthenticated("caller identity is gone")),
            Err(e) => Err(internal(e)),
        }
    }

    fn can_read_thread(&self, p: &Principal, thread_id: &str) -> bool {
        p.is_admin()
            || p.subject().is_some_and(|s| {
                self.services
                    .authz
                    .check(&ObjectRef::thread(thread_id), "read", &s)
                    .unwrap_or(false)
            })
    }

    fn route(&self, req: &InternalRequest) -> Result<ApiResponse, ApiResponse> {
        let s = &self.services;
        let caller = self.caller(req)?;
        let body = &req.body;
        use Route::*;
        Ok(match &req.route {
            Health | EventStream => ApiResponse::bad_request("not a backend route"),
            CreateThread => {
                let agent_id = body["agent_id"].as_str().unwrap_or_default();
                let author = caller.author().ok_or_else(|| ApiResponse::forbidden("no author"))?;
                let subject = caller.subject().ok_or_else(|| ApiResponse::forbidden("no subject"))?;
                let t = s.threads.create_thread(agent_id, &author).map_err(thread_err)?;
                s.authz
                    .grant_defaults_on_thread_create(&t.thread_id, &subject, agent_id)
                    .map_err(authz_err)?;
                ApiResponse::created(json_of(&t))
            }
            ListThreads => {
                let all = s.threads.list().map_err(thread_err)?;
                let visible: Vec<_> = all
                    .into_iter()
                    .filter(|t| self.can_read_thread(&caller, &t.thread_id))
                    .collect();
                ApiResponse::ok(json!({"threads": visible}))
            }
            GetThread(t) => ApiResponse::ok(json_of(&s.threads.get(t).map_err(thread_err)?)),
            ListMessages(t) => {
                let after = req
                    .query
                    .get("after")
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(0);
                let msgs = s.threads.messages(t, after).map_err(thread_err)?;
                ApiResponse::ok(json!({"messages": msgs}))
            }
            PostMessage(t) => {
                let text = body["text"]
                    .as_str()
                    .ok_or_else(|| ApiResponse::bad_request("text is required"))?;
                let author = caller.author().ok_or_else(|| ApiResponse::forbidden("no author"))?;
                let m = s
                    .threads
                    .post_message(t, &author, text, body["in_reply_to"].as_str())
                    .map_err(thread_err)?;
                ApiResponse::created(json_of(&m))
            }
            ListAgents => {
                let defs = s.registry.list_definitions().map_err(registry_err)?;
                ApiResponse::ok(json!({"agents": defs}))
            }
            GetAgent(a) => {
                let sel = match req.query.get("revision") {
                    Some(r) => RevisionSelector::Exact(
                        r.parse()
                            .map_err(|_| ApiResponse::bad_request("revision must be an integer"))?,
                    ),
                    None => RevisionSelector::Latest,
                };
                ApiResponse::ok(json_of(&s.registry.get_definition(a, sel).map_err(registry_err)?))
            }
            PutAgent(a) => {
                let mut doc = body.clone();
                doc["agent_id"] = json!(a);
                if let Some(o) = doc.as_object_mut() {
                    o.remove("revision");
                }
                let def: AgentDefinition = serde_json::from_value(doc)
                    .map_err(|e| ApiResponse::error(400, "validation", e.to_string()))?;
                let existed = s.registry.get_definition(a, RevisionSelector::Latest).is_ok();
                let revision = s
                    .registry
                    .put_definition_expecting(def, expected_revision(req)?)
                    .map_err(registry_err)?;
                if !existed {
                    if let Principal::User(u) = &caller {
                        let t = RelationTuple::new(ObjectRef::agent(a), "owner", Subject::user(&u.name))
                            .map_err(authz_err)?;
                        s.authz.write_tuple(&t).map_err(authz_err)?;
                    }
                }
                ApiResponse::ok(json!({"agent_id": a, "revision": revision}))
            }
            DeleteAgent(a) => {
                let revision = s
                    .registry
                    .delete_definition(a, expected_revision(req)?)
                    .map_err(registry_err)?;
                ApiResponse::ok(json!({"agent_id": a, "revision": revision, "deleted": true}))
            }
            ListInstances => {
                let mut all = orchestrator::load_instances(&s.store).map_err(internal)?;
                for i in &mut all {
                    i.pending.clear();
                }
                ApiResponse::ok(json!({"instances": all}))
            }
            Keepalive(i) => {
                let orch = s
                    .orchestrator()
                    .ok_or_else(|| ApiResponse::error(503, "unavailable", "orchestrator is down"))?;
                let ts = orch
                    .record_keepalive(i, s.clock.now_ms())
                    .map_err(orch_err)?;
                ApiResponse::ok(json!({"instance_id": i, "last_active_ts": ts}))
            }
            ListSecrets => {
                let admin = caller.is_admin();
                let list: Vec<Value> = s
                    .registry
                    .list_secrets()
                    .map_err(registry_err)?
                    .into_iter()
                    .map(|i| {
                        let mut v = json!({
                            "name": i.name,
                            "owner_agent": i.owner_agent,
                            "updated_ts": i.updated_ts,
                        });
                        if admin {
                            v["salt"] = json!(i.salt);
                            v["digest"] = json!(i.digest);
                        }
                        v
                    })
                    .collect();
                ApiResponse::ok(json!({"secrets": list}))
            }
            PutSecret => {
                let name = body["name"].as_str().unwrap_or_default();
                let value = body["value"].as_str().unwrap_or_default();
                let expected = req.headers.get(HEADER_EXPECTED_DIGEST).map(|d| {
                    if d == DIGEST_ABSENT {
                        None
                    } else {
                        Some(d.as_str())
                    }
                });
                s.registry
                    .put_secret_expecting(name, value.as_bytes(), body["owner_agent"].as_str(), expected)
                    .map_err(registry_err)?;
                ApiResponse::ok(json!({"name": name}))
            }
            DeleteSecret(name) => {
                s.registry
                    .delete_secret(name, req.headers.get(HEADER_EXPECTED_DIGEST).map(String::as_str))
                    .map_err(registry_err)?;
                ApiResponse::ok(json!({"name": name, "deleted": true}))
            }
            Dial(service) => {
                let target = self.dial_targets.read().get(service).cloned();
                match target {
                    Some(t) => t.call(req),
                    None => EchoService.call(req),
                }
            }
            ListTuples => {
                let ts: Vec<String> = s.authz.tuples().iter().map(|t| t.to_string()).collect();
                ApiResponse::ok(json!({"tuples": ts}))
            }
            WriteTuple | DeleteTuple => {
                let t: RelationTuple = body["tuple"]
                    .as_str()
                    .unwrap_or_default()
                    .parse()
                    .map_err(authz_err)?;
                if req.route == WriteTuple {
                    s.authz.write_tuple(&t).map_err(authz_err)?;
                } else {
                    s.authz.delete_tuple(&t).map_err(authz_err)?;
                }
                ApiResponse::ok(json!({"tuple": t.to_string()}))
            }
            CheckTuple => {
                #[derive(Deserialize)]
                struct Check {
                    object: String,
                    permission: String,
                    subject: String,
                }
                let c: Check = serde_json::from_value(body.clone())
                    .map_err(|e| ApiResponse::bad_request(e.to_string()))?;
                let object: ObjectRef = c.object.parse().map_err(authz_err)?;
                let subject: Subject = c.subject.parse().map_err(authz_err)?;
                let allowed = s
                    .authz
                    .check(&object, &c.permission, &subject)
                    .map_err(authz_err)?;
                ApiResponse::ok(json!({"allowed": allowed}))
            }
            ListIdentities => {
                let ids = s.identity.list().map_err(identity_err)?;
                ApiResponse::ok(json!({"identities": ids}))
            }
            EnrollService => {
                let name = body["name"]
                    .as_str()
                    .ok_or_else(|| ApiResponse::bad_request("name is required"))?;
                let ttl = body["ttl_s"]
                    .as_u64()
                    .unwrap_or(crate::identity::DEFAULT_SERVICE_TTL_S);
                let (ident, lease, cred) = s
                    .identity
                    .enroll_service_identity(name, ttl, s.clock.now_ms())
                    .map_err(identity_err)?;
                ApiResponse::created(json!({
                    "identity": ident,
                    "lease": lease,
                    "credential": cred.as_str(),
                }))
            }
            RenewLease(l) => {
                let exp = s
                    .identity
                    .renew_lease(l, s.clock.now_ms())
                    .map_err(identity_err)?;
                ApiResponse::ok(json!({"lease_id": l, "expires_ts": exp}))
            }
            DeleteIdentity(i) => {
                s.identity
                    .delete_identity(i, s.clock.now_ms())
                    .map_err(identity_err)?;
                ApiResponse::ok(json!({"identity_id": i, "deleted": true}))
            }
            ListPolicies => {
                ApiResponse::ok(json!({"policies": s.authz.policies().map_err(authz_err)?}))
            }
            PutPolicy(id) => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct Doc {
                    #[serde(default)]
                    policy_id: Option<String>,
                    #[serde(default)]
                    selector: BTreeMap<String, String>,
                    services: BTreeSet<String>,
                }
                let d: Doc = serde_json::from_value(body.clone())
                    .map_err(|e| ApiResponse::bad_request(e.to_string()))?;
                if d.policy_id.as_deref().is_some_and(|p| p != id) {
                    return Err(ApiResponse::bad_request("policy_id does not match the path"));
                }
                let p = DialPolicy {
                    policy_id: id.clone(),
                    selector: d.selector,
                    services: d.services,
                };
                s.authz.put_policy(&p).map_err(authz_err)?;
                ApiResponse::ok(json_of(&p))
            }
            DeletePolicy(id) => {
                s.authz.delete_policy(id).map_err(authz_err)?;
                ApiResponse::ok(json!({"policy_id": id, "deleted": true}))
            }
        })
    }
}

impl Backend for PlatformBackend {
    fn handle(&self, req: &InternalRequest) -> ApiResponse {
        self.route(req).unwrap_or_else(|e| e)
    }
}
