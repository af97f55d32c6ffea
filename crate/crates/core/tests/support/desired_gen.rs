//! Random definition documents (with modules and secrets) and an
//! independent "already in sync" check.
#![allow(dead_code)]

use std::collections::BTreeMap;

use agynlite::configctl::{DesiredState, LiveState};
use agynlite::registry::salted_digest;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

pub struct Generated {
    pub text: String,
    pub secret_values: Vec<String>,
}

pub fn document(rng: &mut impl Rng) -> Generated {
    let secret_names: Vec<String> = (0..rng.gen_range(0..=4)).map(|i| format!("s{i}")).collect();
    let mut secret_values = Vec::new();
    let agent_ids: Vec<String> = (0..6)
        .filter(|_| rng.gen_bool(0.5))
        .map(|i| format!("a{i}"))
        .collect();

    let mut modules = Map::new();
    let with_module = !secret_names.is_empty() && rng.gen_bool(0.5);
    if with_module {
        modules.insert(
            "kv".into(),
            json!({
                "sidecars": [{"name": "kv", "image_or_behavior": "mock-mcp"}],
                "secret_bindings": [{
                    "secret_name": secret_names[0],
                    "target_container": "kv",
                    "env_var": "KV_TOKEN",
                }],
            }),
        );
    }

    let mut agents = Map::new();
    for id in &agent_ids {
        let mut doc = Map::new();
        doc.insert("system_prompt".into(), json!(["be brief", "be kind", "answer in haiku"].choose(rng).unwrap()));
        doc.insert("model".into(), json!(["m1", "m2"].choose(rng).unwrap()));
        doc.insert("main_container".into(), json!({"name": "main", "image_or_behavior": "echo-agent"}));
        if rng.gen_bool(0.5) {
            doc.insert("idle_timeout_s".into(), json!(rng.gen_range(1..600)));
        }
        let mut sidecars = Vec::new();
        let mut bindings = Vec::new();
        if rng.gen_bool(0.4) {
            sidecars.push(json!({"name": "tools", "image_or_behavior": "mock-mcp", "env": {"MODE": "ro"}}));
            if let Some(s) = secret_names.choose(rng) {
                bindings.push(json!({"secret_name": s, "target_container": "tools", "env_var": "TOOLS_KEY"}));
            }
        }
        if rng.gen_bool(0.3) {
            if let Some(s) = secret_names.choose(rng) {
                bindings.push(json!({"secret_name": s, "target_container": "main", "env_var": "MAIN_KEY"}));
            }
        }
        if !sidecars.is_empty() {
            doc.insert("sidecars".into(), Value::Array(sidecars));
        }
        if !bindings.is_empty() {
            doc.insert("secret_bindings".into(), Value::Array(bindings));
        }
        if rng.gen_bool(0.6) {
            doc.insert("volumes".into(), json!([{"name": "ws", "mount_path": "/workspace"}]));
        }
        if with_module && rng.gen_bool(0.6) {
            doc.insert("use_modules".into(), json!(["kv"]));
        }
        agents.insert(id.clone(), Value::Object(doc));
    }

    let mut secrets = Map::new();
    for name in &secret_names {
        let value = format!("secret-{:024x}", rng.gen::<u128>() >> 32);
        secret_values.push(value.clone());
        let entry = match (rng.gen_range(0..3), agent_ids.choose(rng)) {
            (0, _) | (_, None) => json!(value),
            (_, Some(owner)) => json!({"value": value, "owner_agent": owner}),
        };
        secrets.insert(name.clone(), entry);
    }

    let text = serde_json::to_string_pretty(&json!({
        "modules": modules,
        "agents": agents,
        "secrets": secrets,
    }))
    .unwrap();
    Generated { text, secret_values }
}

/// True when live already realizes desired (with deletes allowed).
pub fn in_sync(desired: &DesiredState, live: &LiveState) -> bool {
    if desired.agents.keys().ne(live.agents.keys()) || desired.secrets.keys().ne(live.secrets.keys()) {
        return false;
    }
    for (id, want) in &desired.agents {
        let mut got = live.agents[id].clone();
        got.revision = want.revision;
        if &got != want {
            return false;
        }
    }
    for (name, want) in &desired.secrets {
        let got = &live.secrets[name];
        let (Some(salt), Some(digest)) = (&got.salt, &got.digest) else {
            return false;
        };
        let salt = hex::decode(salt).unwrap();
        if &salted_digest(&salt, want.value.expose().as_bytes()) != digest {
            return false;
        }
        if want.owner_agent.is_some() && want.owner_agent != got.owner_agent {
            return false;
        }
    }
    true
}

pub fn secret_values(d: &DesiredState) -> BTreeMap<String, String> {
    d.secrets
        .iter()
        .map(|(k, v)| (k.clone(), v.value.expose().to_string()))
        .collect()
}
