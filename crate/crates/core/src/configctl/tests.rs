use std::sync::Arc;

use super::*;
use crate::gateway::{LocalClient, UserTable};
use crate::platform::{Platform, PlatformConfig};

fn doc(text: &str) -> Vec<Document> {
    vec![Document::new("defs.json", text)]
}

const BASE: &str = r#"{
  "modules": {
    "mcp-db": {
      "sidecars": [{"name": "db", "image_or_behavior": "mock-mcp"}],
      "secret_bindings": [{"secret_name": "db-pass", "target_container": "db", "env_var": "DB_PASS"}]
    }
  },
  "agents": {
    "a": {
      "system_prompt": "be brief",
      "model": "m1",
      "main_container": {"name": "main", "image_or_behavior": "echo-agent"},
      "use_modules": ["mcp-db"]
    }
  },
  "secrets": {"db-pass": {"value": "hunter2-literal", "owner_agent": "a"}}
}"#;

#[test]
fn modules_expand_into_the_definition() {
    let d = parse_with_env(&doc(BASE), |_| None).unwrap();
    let a = &d.agents["a"];
    assert_eq!(a.sidecars.len(), 1);
    assert_eq!(a.sidecars[0].name, "db");
    assert_eq!(a.secret_bindings.len(), 1);
    assert_eq!(a.secret_bindings[0].env_var, "DB_PASS");
}

#[test]
fn parse_errors() {
    let unknown = BASE.replace("[\"mcp-db\"]", "[\"nope\"]");
    assert!(matches!(
        parse_with_env(&doc(&unknown), |_| None),
        Err(ConfigError::UnknownModule { module, .. }) if module == "nope"
    ));

    let two = vec![Document::new("x.json", BASE), Document::new("y.json", BASE.replace("mcp-db\": {", "other\": {"))];
    match parse_with_env(&two, |_| None) {
        Err(ConfigError::Schema(m)) => assert!(m.contains("declared"), "{m}"),
        other => panic!("{other:?}"),
    }

    match parse_with_env(&doc("{\n  \"agents\": {\n    \"a\": ,\n}"), |_| None) {
        Err(ConfigError::Parse { line, source_name, .. }) => {
            assert_eq!(line, 3);
            assert_eq!(source_name, "defs.json");
        }
        other => panic!("{other:?}"),
    }

    let bad_bind = BASE.replace("\"target_container\": \"db\"", "\"target_container\": \"ghost\"");
    assert!(matches!(parse_with_env(&doc(&bad_bind), |_| None), Err(ConfigError::Schema(_))));
}

#[test]
fn env_references_resolve() {
    let text = r#"{"secrets": {"k": {"env": "K_VAL"}, "lit": "plain"}}"#;
    let d = parse_with_env(&doc(text), |k| (k == "K_VAL").then(|| "from-env".to_string())).unwrap();
    assert_eq!(d.secrets["k"].value.expose(), "from-env");
    assert_eq!(d.secrets["lit"].value.expose(), "plain");
    assert!(parse_with_env(&doc(text), |_| None).is_err());
    assert!(!format!("{:?}", d).contains("from-env"));
}

fn users() -> UserTable {
    UserTable::from_json(
        r#"{"users": [
            {"name": "root", "token": "adm", "admin": true},
            {"name": "carol", "token": "car"}
        ]}"#,
    )
    .unwrap()
}

fn platform() -> (Arc<Platform>, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PlatformConfig::new(dir.path().join("r"), [5; 32], users());
    (Platform::start(cfg).unwrap(), dir)
}

#[test]
fn plan_apply_replan_is_empty() {
    let (p, _d) = platform();
    let api = LocalClient::new(p.gateway().clone(), "adm");
    let desired = parse_with_env(&doc(BASE), |_| None).unwrap();
    let first = plan(&desired, &fetch_live(&api).unwrap(), PlanOptions::default());
    assert_eq!(first.count(ActionKind::Create), 2);
    let rendered = first.render_human() + &first.to_json().to_string();
    assert!(!rendered.contains("hunter2-literal"));
    assert!(rendered.contains(SENSITIVE));

    let report = apply(&api, &first);
    assert!(report.is_success(), "{}", report.render_human());
    let again = plan(&desired, &fetch_live(&api).unwrap(), PlanOptions::default());
    assert!(again.is_empty(), "{}", again.render_human());

    // the same plan a second time is stale
    let report = apply(&api, &first);
    assert!(report.is_stale(), "{report:?}");
    assert_eq!(report.outcomes[0].status, OutcomeStatus::Failed);
}

#[test]
fn prompt_change_is_one_field() {
    let (p, _d) = platform();
    let api = LocalClient::new(p.gateway().clone(), "adm");
    let desired = parse_with_env(&doc(BASE), |_| None).unwrap();
    apply(&api, &plan(&desired, &fetch_live(&api).unwrap(), PlanOptions::default()));

    let changed = parse_with_env(&doc(&BASE.replace("be brief", "be verbose")), |_| None).unwrap();
    let pl = plan(&changed, &fetch_live(&api).unwrap(), PlanOptions::default());
    assert_eq!(pl.actions.len(), 1);
    let a = &pl.actions[0];
    assert_eq!((a.kind, a.resource), (ActionKind::Update, ResourceKind::Agent));
    assert_eq!(a.stamp, Stamp::Revision(1));
    assert_eq!(a.diffs.len(), 1);
    assert_eq!(a.diffs[0].field, "system_prompt");
    let r = apply(&api, &pl);
    assert_eq!(r.outcomes[0].revision, Some(2));
}

#[test]
fn deletes_are_blocked_without_opt_in() {
    let (p, _d) = platform();
    let api = LocalClient::new(p.gateway().clone(), "adm");
    let desired = parse_with_env(&doc(BASE), |_| None).unwrap();
    apply(&api, &plan(&desired, &fetch_live(&api).unwrap(), PlanOptions::default()));

    let empty = DesiredState::default();
    let live = fetch_live(&api).unwrap();
    let guarded = plan(&empty, &live, PlanOptions::default());
    assert_eq!(guarded.blocked(), 2);
    assert!(!guarded.is_empty());
    let r = apply(&api, &guarded);
    assert!(r.outcomes.iter().all(|o| o.status == OutcomeStatus::Blocked));
    assert_eq!(fetch_live(&api).unwrap().agents.len(), 1);

    let open = plan(&empty, &live, PlanOptions { allow_delete: true });
    assert!(apply(&api, &open).is_success());
    assert!(plan(&empty, &fetch_live(&api).unwrap(), PlanOptions { allow_delete: true }).is_empty());
}

#[test]
fn forbidden_action_halts_with_prefix_applied() {
    let (p, _d) = platform();
    let admin = LocalClient::new(p.gateway().clone(), "adm");
    let base = parse_with_env(&doc(BASE), |_| None).unwrap();
    apply(&admin, &plan(&base, &fetch_live(&admin).unwrap(), PlanOptions::default()));

    // carol may create a new agent but may not touch a
    let carol = LocalClient::new(p.gateway().clone(), "car");
    let mut desired = base.clone();
    desired.secrets.clear();
    let mut b = desired.agents["a"].clone();
    b.agent_id = "b".into();
    b.sidecars.clear();
    b.secret_bindings.clear();
    desired.agents.insert("b".into(), b);
    desired.agents.get_mut("a").unwrap().system_prompt = "hijack".into();
    let live = fetch_live(&carol).unwrap();
    let pl = plan(&desired, &live, PlanOptions::default());
    assert_eq!(pl.actions[0].name, "a");
    let r = apply(&carol, &pl);
    assert!(matches!(r.error, Some(ApplyError::Gateway { status: 403, .. })), "{r:?}");
    assert_eq!(r.outcomes[1].status, OutcomeStatus::NotAttempted);
    let after = fetch_live(&admin).unwrap();
    assert_eq!(after.agents["a"].system_prompt, "be brief");
    assert!(!after.agents.contains_key("b"));
}
