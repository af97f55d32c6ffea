use agynlite::registry::{AgentDefinition, ContainerSpec, SecretBinding, VolumeSpec};
use serde_json::Value;

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/schema/agent.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

#[test]
fn schema_fields_match_the_serialized_definition() {
    let s = schema();
    let mut main = ContainerSpec::new("main", "echo-agent");
    main.env.insert("A".into(), "b".into());
    let def = AgentDefinition {
        agent_id: "a".into(),
        revision: 3,
        system_prompt: "p".into(),
        model: "m".into(),
        main_container: main,
        sidecars: vec![ContainerSpec::new("side", "noop")],
        secret_bindings: vec![SecretBinding {
            secret_name: "s".into(),
            target_container: "side".into(),
            env_var: "S".into(),
        }],
        volumes: vec![VolumeSpec {
            name: "ws".into(),
            mount_path: "/w".into(),
        }],
        idle_timeout_s: 5,
        keepalive_interval_s: 1,
    };
    let v = serde_json::to_value(&def).unwrap();
    assert_eq!(keys(&v), keys(&s["properties"]));
    assert_eq!(keys(&v["main_container"]), keys(&s["$defs"]["container"]["properties"]));
    assert_eq!(keys(&v["secret_bindings"][0]), keys(&s["$defs"]["binding"]["properties"]));
    assert_eq!(keys(&v["volumes"][0]), keys(&s["$defs"]["volume"]["properties"]));

    // every required field is enough to deserialize
    let minimal: Value = serde_json::json!({
        "agent_id": "a", "system_prompt": "", "model": "m",
        "main_container": {"name": "main", "image_or_behavior": "noop"}
    });
    let required: Vec<&str> = s["required"].as_array().unwrap().iter().map(|r| r.as_str().unwrap()).collect();
    assert_eq!(keys(&minimal), {
        let mut r: Vec<String> = required.iter().map(|s| s.to_string()).collect();
        r.sort();
        r
    });
    let d: AgentDefinition = serde_json::from_value(minimal).unwrap();
    assert_eq!(d.idle_timeout_s, s["properties"]["idle_timeout_s"]["default"].as_u64().unwrap());
    assert_eq!(d.keepalive_interval_s, s["properties"]["keepalive_interval_s"]["default"].as_u64().unwrap());
}
