//! The single ingress. Authenticates every request, checks authorization
//! against the route table, and forwards accepted calls to the backend with
//! the caller stamped into `X-Agyn-Identity`.
//!
//! | route                              | requirement                          |
//! |------------------------------------|--------------------------------------|
//! | `POST /threads`                    | `agent.create_thread`                |
//! | `GET /threads`, `GET /threads/{id}`| authenticated / `thread.read`        |
//! | `GET /threads/{id}/messages`       | `thread.read`                        |
//! | `POST /threads/{id}/messages`      | `thread.post`                        |
//! | `GET /agents`, `GET /agents/{id}`  | authenticated                        |
//! | `PUT /agents/{id}`                 | `agent.configure` (new agent: user)  |
//! | `DELETE /agents/{id}`              | `agent.delete`                       |
//! | `GET /instances`                   | authenticated                        |
//! | `POST /instances/{id}/keepalive`   | the instance's own identity          |
//! | `GET /secrets`                     | authenticated (digests: admin)       |
//! | `POST /secrets`                    | `agent.configure` on owner, or admin |
//! | `DELETE /secrets/{name}`           | `agent.configure` on owner, or admin |
//! | `POST /dial/{service}`             | a matching dial policy               |
//! | `GET /events/stream`               | authenticated                        |
//! | `POST /tuples/check`               | authenticated                        |
//! | `POST/DELETE /tuples`              | owner of the agent, or admin         |
//! | `GET /tuples`, `/identities`, `/policies` and their writes | admin |

mod backend;
pub mod client;
pub mod http;
mod users;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::authz::{AuthzError, ObjectRef, ObjectType, RelationTuple, Subject};
use crate::events::{Event, Subscription, TOPICS, TOPIC_IDENTITY_CHANGE, TOPIC_INSTANCE_STATE, TOPIC_THREAD_MESSAGE};
use crate::identity::{Identity, IdentityClass};
use crate::platform::Services;
use crate::registry::RevisionSelector;
use crate::runner::{NetResponse, Network};

pub use backend::{Backend, EchoService, InternalRequest, InternalService, PlatformBackend};
pub use client::{Api, ClientError, HttpClient, LocalClient};
pub use users::{User, UserEntry, UserTable};

pub const HEADER_AUTHORIZATION: &str = "authorization";
pub const HEADER_IDENTITY_TOKEN: &str = "x-agyn-identity-token";
pub const HEADER_IDENTITY: &str = "x-agyn-identity";
pub const HEADER_EXPECTED_REVISION: &str = "x-agyn-expected-revision";
pub const HEADER_EXPECTED_DIGEST: &str = "x-agyn-expected-digest";
/// `X-Agyn-Expected-Digest` value meaning "the secret must not exist".
pub const DIGEST_ABSENT: &str = "absent";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApiRequest {
    pub method: String,
    /// Path, optionally with a query string.
    pub path: String,
    /// Lower-cased names.
    pub headers: BTreeMap<String, String>,
    pub body: Value,
}

impl ApiRequest {
    pub fn new(method: &str, path: &str) -> Self {
        Self {
            method: method.to_ascii_uppercase(),
            path: path.to_string(),
            headers: BTreeMap::new(),
            body: Value::Null,
        }
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers
            .insert(name.to_ascii_lowercase(), value.to_string());
        self
    }

    pub fn bearer(self, token: &str) -> Self {
        self.header(HEADER_AUTHORIZATION, &format!("Bearer {token}"))
    }

    pub fn identity_token(self, token: &str) -> Self {
        self.header(HEADER_IDENTITY_TOKEN, token)
    }

    pub fn json(mut self, body: Value) -> Self {
        self.body = body;
        self
    }

    fn split(&self) -> (&str, BTreeMap<String, String>) {
        let (path, query) = self.path.split_once('?').unwrap_or((&self.path, ""));
        (path, parse_query(query))
    }
}

fn parse_query(q: &str) -> BTreeMap<String, String> {
    q.split('&')
        .filter(|s| !s.is_empty())
        .map(|kv| {
            let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
            (k.to_string(), v.replace('+', " "))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    pub fn ok(body: Value) -> Self {
        Self { status: 200, body }
    }

    pub fn created(body: Value) -> Self {
        Self { status: 201, body }
    }

    pub fn error(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"code": code, "message": message.into()}),
        }
    }

    pub fn unauthenticated(message: impl Into<String>) -> Self {
        Self::error(401, "unauthenticated", message)
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::error(403, "forbidden", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::error(404, "not_found", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::error(400, "bad_request", message)
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// The `code` of an error body.
    pub fn code(&self) -> Option<&str> {
        self.body["code"].as_str()
    }
}

/// Who is calling, as established at ingress.
#[derive(Debug, Clone, PartialEq)]
pub enum Principal {
    User(User),
    Identity(Identity),
}

impl Principal {
    /// The value stamped into `X-Agyn-Identity`.
    pub fn header_value(&self) -> String {
        match self {
            Principal::User(u) => format!("user:{}", u.name),
            Principal::Identity(i) => i.identity_id.clone(),
        }
    }

    pub fn is_admin(&self) -> bool {
        matches!(self, Principal::User(u) if u.admin)
    }

    /// ReBAC subject: users as themselves, workload identities as their
    /// agent. Service and persistent identities have none.
    pub fn subject(&self) -> Option<Subject> {
        match self {
            Principal::User(u) => Some(Subject::user(&u.name)),
            Principal::Identity(i) if i.class == IdentityClass::EphemeralWorkload => {
                i.attributes.get("agent_id").map(Subject::agent)
            }
            Principal::Identity(_) => None,
        }
    }

    /// Message author / thread creator label.
    pub fn author(&self) -> Option<String> {
        self.subject().map(|s| s.to_string())
    }
}

/// Parsed route. Path ids are raw segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Health,
    CreateThread,
    ListThreads,
    GetThread(String),
    ListMessages(String),
    PostMessage(String),
    ListAgents,
    GetAgent(String),
    PutAgent(String),
    DeleteAgent(String),
    ListInstances,
    Keepalive(String),
    ListSecrets,
    PutSecret,
    DeleteSecret(String),
    Dial(String),
    EventStream,
    ListTuples,
    WriteTuple,
    DeleteTuple,
    CheckTuple,
    ListIdentities,
    EnrollService,
    RenewLease(String),
    DeleteIdentity(String),
    ListPolicies,
    PutPolicy(String),
    DeletePolicy(String),
}

impl Route {
    pub fn parse(method: &str, path: &str) -> Option<Route> {
        let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
        let id = |s: &str| (!s.is_empty()).then(|| s.to_string());
        use Route::*;
        Some(match (method, segs.as_slice()) {
            ("GET", ["health"]) => Health,
            ("POST", ["threads"]) => CreateThread,
            ("GET", ["threads"]) => ListThreads,
            ("GET", ["threads", t]) => GetThread(id(t)?),
            ("GET", ["threads", t, "messages"]) => ListMessages(id(t)?),
            ("POST", ["threads", t, "messages"]) => PostMessage(id(t)?),
            ("GET", ["agents"]) => ListAgents,
            ("GET", ["agents", a]) => GetAgent(id(a)?),
            ("PUT", ["agents", a]) => PutAgent(id(a)?),
            ("DELETE", ["agents", a]) => DeleteAgent(id(a)?),
            ("GET", ["instances"]) => ListInstances,
            ("POST", ["instances", i, "keepalive"]) => Keepalive(id(i)?),
            ("GET", ["secrets"]) => ListSecrets,
            ("POST", ["secrets"]) => PutSecret,
            ("DELETE", ["secrets", s]) => DeleteSecret(id(s)?),
            ("POST", ["dial", s]) => Dial(id(s)?),
            ("GET", ["events", "stream"]) => EventStream,
            ("GET", ["tuples"]) => ListTuples,
            ("POST", ["tuples"]) => WriteTuple,
            ("DELETE", ["tuples"]) => DeleteTuple,
            ("POST", ["tuples", "check"]) => CheckTuple,
            ("GET", ["identities"]) => ListIdentities,
            ("POST", ["identities", "service"]) => EnrollService,
            ("POST", ["leases", l, "renew"]) => RenewLease(id(l)?),
            ("DELETE", ["identities", i]) => DeleteIdentity(id(i)?),
            ("GET", ["policies"]) => ListPolicies,
            ("PUT", ["policies", p]) => PutPolicy(id(p)?),
            ("DELETE", ["policies", p]) => DeletePolicy(id(p)?),
            _ => return None,
        })
    }

    pub fn is_mutating(&self) -> bool {
        use Route::*;
        !matches!(
            self,
            Health
                | ListThreads
                | GetThread(_)
                | ListMessages(_)
                | ListAgents
                | GetAgent(_)
                | ListInstances
                | ListSecrets
                | EventStream
                | ListTuples
                | CheckTuple
                | ListIdentities
                | ListPolicies
        )
    }
}

pub struct Gateway {
    services: Arc<Services>,
    users: UserTable,
    platform_backend: Arc<PlatformBackend>,
    backend: Arc<dyn Backend>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").finish_non_exhaustive()
    }
}

type Denied = ApiResponse;

impl Gateway {
    pub fn new(services: Arc<Services>, users: UserTable) -> Self {
        let platform_backend = Arc::new(PlatformBackend::new(services.clone(), users.clone()));
        Self {
            services,
            users,
            backend: platform_backend.clone(),
            platform_backend,
        }
    }

    /// Routes accepted calls through `wrap(platform backend)` instead, e.g.
    /// a recording layer.
    pub fn with_backend(
        services: Arc<Services>,
        users: UserTable,
        wrap: impl FnOnce(Arc<PlatformBackend>) -> Arc<dyn Backend>,
    ) -> Self {
        let platform_backend = Arc::new(PlatformBackend::new(services.clone(), users.clone()));
        Self {
            services,
            users,
            backend: wrap(platform_backend.clone()),
            platform_backend,
        }
    }

    /// Registers an internal service reachable through `POST /dial/{name}`.
    pub fn register_service(&self, name: &str, service: Arc<dyn InternalService>) {
        self.platform_backend.register_service(name, service);
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    /// Resolves the caller. Client-supplied `X-Agyn-Identity` is never
    /// consulted.
    pub fn authenticate(&self, req: &ApiRequest) -> Result<Principal, Denied> {
        if let Some(tok) = req.headers.get(HEADER_IDENTITY_TOKEN) {
            return self
                .services
                .identity
                .verify(tok.trim())
                .map(Principal::Identity)
                .map_err(|_| ApiResponse::unauthenticated("invalid or revoked identity token"));
        }
        if let Some(auth) = req.headers.get(HEADER_AUTHORIZATION) {
            let token = auth
                .strip_prefix("Bearer ")
                .or_else(|| auth.strip_prefix("bearer "))
                .ok_or_else(|| ApiResponse::unauthenticated("expected a Bearer token"))?;
            return self
                .users
                .authenticate(token.trim())
                .map(Principal::User)
                .ok_or_else(|| ApiResponse::unauthenticated("unknown user token"));
        }
        Err(ApiResponse::unauthenticated("no credential presented"))
    }

    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        let (path, query) = req.split();
        let Some(route) = Route::parse(&req.method, path) else {
            return ApiResponse::not_found(format!("no route for {} {}", req.method, path));
        };
        if route == Route::Health {
            return ApiResponse::ok(json!({"status": "ok"}));
        }
        let principal = match self.authenticate(req) {
            Ok(p) => p,
            Err(r) => return r,
        };
        if route == Route::EventStream {
            return ApiResponse::bad_request("the event stream is served over SSE");
        }
        if let Err(r) = self.authorize(&principal, &route, &req.body) {
            return r;
        }
        let mut headers: BTreeMap<String, String> = req
            .headers
            .iter()
            .filter(|(k, _)| {
                k.as_str() != HEADER_IDENTITY
                    && k.as_str() != HEADER_AUTHORIZATION
                    && k.as_str() != HEADER_IDENTITY_TOKEN
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        headers.insert(HEADER_IDENTITY.into(), principal.header_value());
        self.backend.handle(&InternalRequest {
            route,
            query,
            headers,
            body: req.body.clone(),
        })
    }

    fn check(&self, p: &Principal, object: ObjectRef, permission: &str) -> Result<(), Denied> {
        if p.is_admin() {
            return Ok(());
        }
        let Some(subject) = p.subject() else {
            return Err(ApiResponse::forbidden("principal has no relationships"));
        };
        match self.services.authz.check(&object, permission, &subject) {
            Ok(true) => Ok(()),
            Ok(false) => Err(ApiResponse::forbidden(format!(
                "{subject} lacks {permission} on {object}"
            ))),
            Err(AuthzError::DepthExceeded(n)) => Err(ApiResponse::error(
                403,
                "authz_depth_exceeded",
                format!("relationship expansion exceeded depth {n}"),
            )),
            Err(e) => Err(ApiResponse::error(500, "internal", e.to_string())),
        }
    }

    fn require_admin(&self, p: &Principal) -> Result<(), Denied> {
        if p.is_admin() {
            Ok(())
        } else {
            Err(ApiResponse::forbidden("admin only"))
        }
    }

    fn thread_exists(&self, id: &str) -> Result<(), Denied> {
        self.services
            .threads
            .get(id)
            .map(|_| ())
            .map_err(|_| ApiResponse::not_found(format!("thread {id}")))
    }

    fn agent_exists(&self, id: &str) -> bool {
        self.services
            .registry
            .get_definition(id, RevisionSelector::Latest)
            .is_ok()
    }

    /// Route-table enforcement. Pure reads only.
    fn authorize(&self, p: &Principal, route: &Route, body: &Value) -> Result<(), Denied> {
        use Route::*;
        match route {
            Health | ListThreads | ListAgents | GetAgent(_) | ListInstances | ListSecrets
            | CheckTuple | EventStream => Ok(()),
            CreateThread => {
                let agent_id = body["agent_id"]
                    .as_str()
                    .ok_or_else(|| ApiResponse::bad_request("agent_id is required"))?;
                if !self.agent_exists(agent_id) {
                    return Err(ApiResponse::not_found(format!("agent {agent_id}")));
                }
                if p.author().is_none() {
                    return Err(ApiResponse::forbidden("principal cannot own threads"));
                }
                self.check(p, ObjectRef::agent(agent_id), "create_thread")
            }
            GetThread(t) | ListMessages(t) => {
                self.thread_exists(t)?;
                self.check(p, ObjectRef::thread(t), "read")
            }
            PostMessage(t) => {
                self.thread_exists(t)?;
                if p.author().is_none() {
                    return Err(ApiResponse::forbidden("principal cannot author messages"));
                }
                self.check(p, ObjectRef::thread(t), "post")
            }
            PutAgent(a) => {
                if !body.is_object() {
                    return Err(ApiResponse::bad_request("body must be an agent definition"));
                }
                if body["agent_id"].as_str().is_some_and(|id| id != a) {
                    return Err(ApiResponse::bad_request("agent_id does not match the path"));
                }
                if self.agent_exists(a) {
                    self.check(p, ObjectRef::agent(a), "configure")
                } else if matches!(p, Principal::User(_)) {
                    Ok(())
                } else {
                    Err(ApiResponse::forbidden("only users may create agents"))
                }
            }
            DeleteAgent(a) => {
                if !self.agent_exists(a) {
                    return Err(ApiResponse::not_found(format!("agent {a}")));
                }
                self.check(p, ObjectRef::agent(a), "delete")
            }
            Keepalive(i) => match p {
                Principal::Identity(id)
                    if id.class == IdentityClass::EphemeralWorkload
                        && id.attributes.get("instance_id") == Some(i) =>
                {
                    Ok(())
                }
                _ => Err(ApiResponse::forbidden(
                    "only an instance's own identity may keep it alive",
                )),
            },
            PutSecret => {
                let name = body["name"]
                    .as_str()
                    .ok_or_else(|| ApiResponse::bad_request("name is required"))?;
                if !body["value"].is_string() {
                    return Err(ApiResponse::bad_request("value must be a string"));
                }
                if p.is_admin() {
                    return Ok(());
                }
                let existing = self
                    .services
                    .registry
                    .secret_info(name)
                    .map_err(|e| ApiResponse::error(500, "internal", e.to_string()))?
                    .and_then(|s| s.owner_agent);
                let requested = body["owner_agent"].as_str().map(str::to_string);
                let owners: Vec<String> = existing.into_iter().chain(requested).collect();
                if owners.is_empty() {
                    return Err(ApiResponse::forbidden(
                        "unowned secrets are admin-managed; set owner_agent",
                    ));
                }
                for o in owners {
                    if !self.agent_exists(&o) {
                        return Err(ApiResponse::not_found(format!("agent {o}")));
                    }
                    self.check(p, ObjectRef::agent(o), "configure")?;
                }
                Ok(())
            }
            DeleteSecret(name) => {
                let info = self
                    .services
                    .registry
                    .secret_info(name)
                    .map_err(|e| ApiResponse::error(500, "internal", e.to_string()))?
                    .ok_or_else(|| ApiResponse::not_found(format!("secret {name}")))?;
                if p.is_admin() {
                    return Ok(());
                }
                match info.owner_agent {
                    Some(o) => self.check(p, ObjectRef::agent(o), "configure"),
                    None => Err(ApiResponse::forbidden("unowned secrets are admin-managed")),
                }
            }
            Dial(service) => {
                let Principal::Identity(id) = p else {
                    return Err(ApiResponse::forbidden("dials require an overlay identity"));
                };
                match self.services.authz.dial_allowed(&id.attributes, service) {
                    Ok(true) => Ok(()),
                    Ok(false) => Err(ApiResponse::forbidden(format!(
                        "no dial policy grants {service}"
                    ))),
                    Err(e) => Err(ApiResponse::error(500, "internal", e.to_string())),
                }
            }
            WriteTuple | DeleteTuple => {
                let t: RelationTuple = body["tuple"]
                    .as_str()
                    .ok_or_else(|| ApiResponse::bad_request("tuple is required"))?
                    .parse()
                    .map_err(|e: AuthzError| ApiResponse::bad_request(e.to_string()))?;
                if p.is_admin() {
                    return Ok(());
                }
                match t.object.kind {
                    ObjectType::Agent => self.check(p, t.object.clone(), "delete"),
                    ObjectType::Thread => {
                        let thread = self
                            .services
                            .threads
                            .get(&t.object.id)
                            .map_err(|_| ApiResponse::not_found(format!("thread {}", t.object.id)))?;
                        self.check(p, ObjectRef::agent(thread.agent_id), "delete")
                    }
                }
            }
            ListTuples | ListIdentities | EnrollService | RenewLease(_) | DeleteIdentity(_)
            | ListPolicies | PutPolicy(_) | DeletePolicy(_) => self.require_admin(p),
        }
    }

    /// Opens the live feed for `GET /events/stream?topics=a,b`. A user token
    /// may also come as `access_token=`. Thread
    /// messages are filtered to threads the caller can read; identity
    /// changes are admin-only.
    pub fn open_event_stream(&self, req: &ApiRequest) -> Result<EventFeed, ApiResponse> {
        let (path, query) = req.split();
        if Route::parse(&req.method, path) != Some(Route::EventStream) {
            return Err(ApiResponse::not_found(path.to_string()));
        }
        // browsers' EventSource cannot set headers
        let principal = match query.get("access_token") {
            Some(t) if !req.headers.contains_key(HEADER_AUTHORIZATION) => {
                self.authenticate(&ApiRequest::new("GET", path).bearer(t))?
            }
            _ => self.authenticate(req)?,
        };
        let topics: Vec<String> = match query.get("topics") {
            Some(t) => t.split(',').map(str::to_string).collect(),
            None => vec![TOPIC_INSTANCE_STATE.into(), TOPIC_THREAD_MESSAGE.into()],
        };
        for t in &topics {
            if !TOPICS.contains(&t.as_str()) {
                return Err(ApiResponse::bad_request(format!("unknown topic {t}")));
            }
            if t == TOPIC_IDENTITY_CHANGE && !principal.is_admin() {
                return Err(ApiResponse::forbidden("identity.change is admin-only"));
            }
        }
        let subs = topics
            .iter()
            .map(|t| self.services.bus.subscribe_ephemeral(t))
            .collect();
        Ok(EventFeed {
            services: self.services.clone(),
            principal,
            subs,
        })
    }
}

impl Network for Gateway {
    fn call(
        &self,
        credential: Option<&str>,
        method: &str,
        path: &str,
        body: Option<&Value>,
    ) -> NetResponse {
        let mut req = ApiRequest::new(method, path);
        if let Some(c) = credential {
            req = req.identity_token(c);
        }
        if let Some(b) = body {
            req.body = b.clone();
        }
        let r = self.handle(&req);
        NetResponse {
            status: r.status,
            body: r.body,
        }
    }
}

/// A caller's live event subscription.
pub struct EventFeed {
    services: Arc<Services>,
    principal: Principal,
    subs: Vec<Subscription>,
}

impl std::fmt::Debug for EventFeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventFeed")
            .field("topics", &self.subs.iter().map(|s| s.topic()).collect::<Vec<_>>())
            .finish()
    }
}

impl EventFeed {
    fn visible(&self, e: &Event) -> bool {
        if e.topic != TOPIC_THREAD_MESSAGE || self.principal.is_admin() {
            return true;
        }
        let (Some(thread), Some(subject)) = (e.payload["thread_id"].as_str(), self.principal.subject())
        else {
            return false;
        };
        self.services
            .authz
            .check(&ObjectRef::thread(thread), "read", &subject)
            .unwrap_or(false)
    }

    /// Next visible event, waiting up to `timeout`.
    pub fn next(&self, timeout: Duration) -> Option<Event> {
        let deadline = Instant::now() + timeout;
        loop {
            for s in &self.subs {
                while let Some(d) = s.try_recv() {
                    let _ = s.ack(&d.event.id);
                    if self.visible(&d.event) {
                        return Some(d.event);
                    }
                }
            }
            if Instant::now() >= deadline {
                return None;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

/// One SSE frame: `event: <topic>\ndata: <json>\n\n`.
pub fn sse_frame(e: &Event) -> String {
    format!("event: {}\ndata: {}\n\n", e.topic, event_json(e))
}

pub fn event_json(e: &Event) -> Value {
    json!({"id": e.id, "topic": e.topic, "payload": e.payload, "ts": e.ts})
}
