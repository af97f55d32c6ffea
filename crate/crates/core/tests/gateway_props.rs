use std::sync::{Arc, Mutex};

use agynlite::gateway::{
    ApiRequest, ApiResponse, Backend, Gateway, InternalRequest, PlatformBackend, UserTable, HEADER_IDENTITY,
};
use agynlite::platform::{Platform, PlatformConfig};
use agynlite::store::Record;
use proptest::prelude::*;
use serde_json::{json, Value};

const USERS: &str = r#"{"users": [
    {"name": "root", "token": "tok-admin", "admin": true},
    {"name": "alice", "token": "tok-alice"},
    {"name": "bob", "token": "tok-bob"}
]}"#;

struct Env {
    platform: Arc<Platform>,
    thread_id: String,
    _dir: tempfile::TempDir,
}

impl Env {
    /// alice owns agent `a1` with one thread, one secret, one policy, and
    /// one enrolled service.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PlatformConfig::new(dir.path().join("runner"), [3; 32], UserTable::from_json(USERS).unwrap());
        let platform = Platform::start(cfg).unwrap();
        let call = |tok: &str, m: &str, p: &str, b: Value| {
            let r = platform.gateway().handle(&ApiRequest::new(m, p).bearer(tok).json(b));
            assert!(r.is_success(), "{m} {p}: {r:?}");
            r
        };
        call(
            "tok-alice",
            "PUT",
            "/agents/a1",
            json!({"system_prompt": "p", "model": "m", "main_container": {"name": "main", "image_or_behavior": "noop"}}),
        );
        let t = call("tok-alice", "POST", "/threads", json!({"agent_id": "a1"}));
        call("tok-admin", "POST", "/secrets", json!({"name": "s1", "value": "hunter2", "owner_agent": "a1"}));
        call("tok-admin", "PUT", "/policies/p1", json!({"selector": {"service": "x"}, "services": ["kv"]}));
        call("tok-admin", "POST", "/identities/service", json!({"name": "kv", "ttl_s": 600}));
        Self {
            platform,
            thread_id: t.body["thread_id"].as_str().unwrap().to_string(),
            _dir: dir,
        }
    }

    fn state(&self) -> Vec<Record> {
        self.platform.services().store.scan("").unwrap()
    }
}

impl Drop for Env {
    fn drop(&mut self) {
        self.platform.shutdown();
    }
}

fn mutating_routes(thread: &str) -> Vec<(&'static str, String, Value)> {
    vec![
        ("POST", "/threads".into(), json!({"agent_id": "a1"})),
        ("POST", format!("/threads/{thread}/messages"), json!({"text": "hi"})),
        ("PUT", "/agents/a2".into(), json!({"system_prompt": "p", "model": "m", "main_container": {"name": "main", "image_or_behavior": "noop"}})),
        ("PUT", "/agents/a1".into(), json!({"system_prompt": "changed", "model": "m", "main_container": {"name": "main", "image_or_behavior": "noop"}})),
        ("DELETE", "/agents/a1".into(), json!({})),
        ("POST", "/instances/i-nope/keepalive".into(), json!({})),
        ("POST", "/secrets".into(), json!({"name": "s2", "value": "v"})),
        ("DELETE", "/secrets/s1".into(), json!({})),
        ("POST", "/dial/kv".into(), json!({})),
        ("POST", "/tuples".into(), json!({"tuple": "agent:a1#owner@user:mallory"})),
        ("DELETE", "/tuples".into(), json!({"tuple": "agent:a1#owner@user:alice"})),
        ("POST", "/identities/service".into(), json!({"name": "svc"})),
        ("POST", "/leases/lease-x/renew".into(), json!({})),
        ("DELETE", "/identities/id-x".into(), json!({})),
        ("PUT", "/policies/p2".into(), json!({"selector": {}, "services": ["kv"]})),
        ("DELETE", "/policies/p1".into(), json!({})),
    ]
}

/// Credential variants that must all fail authentication.
fn bad_credentials() -> Vec<Vec<(&'static str, String)>> {
    vec![
        vec![],
        vec![("authorization", "Bearer not-a-user".into())],
        vec![("authorization", "Basic dG9rLWFkbWlu".into())],
        vec![("authorization", "tok-admin".into())],
        vec![(HEADER_IDENTITY, "user:root".into())],
        vec![("x-agyn-identity-token", "garbage.token".into())],
        vec![("x-agyn-identity-token", "".into()), ("authorization", "Bearer tok-admin".into())],
    ]
}

#[test]
fn unauthenticated_mutations_leave_store_byte_identical() {
    let env = Env::new();
    let routes = mutating_routes(&env.thread_id);
    let before = env.state();
    for (method, path, body) in &routes {
        for creds in bad_credentials() {
            let mut req = ApiRequest::new(method, path).json(body.clone());
            for (k, v) in &creds {
                req = req.header(k, v);
            }
            let r = env.platform.gateway().handle(&req);
            assert_eq!(r.status, 401, "{method} {path} {creds:?}: {r:?}");
        }
    }
    assert_eq!(env.state(), before);
}

struct Recorder {
    inner: Arc<PlatformBackend>,
    seen: Arc<Mutex<Vec<InternalRequest>>>,
}

impl Backend for Recorder {
    fn handle(&self, req: &InternalRequest) -> ApiResponse {
        self.seen.lock().unwrap().push(req.clone());
        self.inner.handle(req)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Whatever the client sends, the downstream identity header equals the
    /// authenticated principal.
    #[test]
    fn downstream_identity_is_the_authenticated_principal(
        calls in proptest::collection::vec((0usize..5, 0usize..16, any::<bool>()), 1..30)
    ) {
        let env = Env::new();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s2 = seen.clone();
        let services = env.platform.services().clone();
        let gw = Gateway::with_backend(services.clone(), UserTable::from_json(USERS).unwrap(), move |inner| {
            Arc::new(Recorder { inner, seen: s2 })
        });
        let (svc, cred) = {
            let r = gw.handle(&ApiRequest::new("POST", "/identities/service").bearer("tok-admin").json(json!({"name": "probe"})));
            (
                r.body["identity"]["identity_id"].as_str().unwrap().to_string(),
                r.body["credential"].as_str().unwrap().to_string(),
            )
        };
        let routes = mutating_routes(&env.thread_id);
        for (who, route, forge) in calls {
            let (method, path, body) = &routes[route];
            let mut req = ApiRequest::new(method, path).json(body.clone());
            let expected = match who {
                0 => { req = req.bearer("tok-admin"); Some("user:root".to_string()) }
                1 => { req = req.bearer("tok-alice"); Some("user:alice".to_string()) }
                2 => { req = req.bearer("tok-bob"); Some("user:bob".to_string()) }
                3 => { req = req.identity_token(&cred); Some(svc.clone()) }
                _ => None,
            };
            if forge {
                req = req.header(HEADER_IDENTITY, "user:root");
            }
            let n_before = seen.lock().unwrap().len();
            let r = gw.handle(&req);
            let log = seen.lock().unwrap();
            match &expected {
                None => {
                    prop_assert_eq!(r.status, 401);
                    prop_assert_eq!(log.len(), n_before);
                }
                Some(caller) => {
                    if log.len() > n_before {
                        let last = log.last().unwrap();
                        prop_assert_eq!(last.caller(), caller.as_str());
                        prop_assert!(!last.headers.contains_key("authorization"));
                        prop_assert!(!last.headers.contains_key("x-agyn-identity-token"));
                    } else {
                        prop_assert!(r.status == 403 || r.status == 400 || r.status == 404, "{:?}", r);
                    }
                }
            }
        }
    }
}
