use super::*;
use crate::clock::ManualClock;
use crate::events::Subscription;
use crate::registry::{AgentDefinition, ContainerSpec, SecretBinding, Sealer, VolumeSpec};
use crate::runner::{NetworkSlot, SimRunner};

struct Fixture {
    clock: Arc<ManualClock>,
    registry: Arc<Registry>,
    identity: Arc<IdentityProvider>,
    threads: Arc<Threads>,
    runner: SimRunner,
    orch: Orchestrator,
    sub: Subscription,
    _dir: tempfile::TempDir,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::in_memory());
    let clock = ManualClock::new(1_000_000);
    let bus = EventBus::open(store.clone(), clock.clone(), 5_000).unwrap();
    let registry = Arc::new(Registry::new(
        store.clone(),
        bus.clone(),
        clock.clone(),
        Sealer::new([7; 32]),
    ));
    let identity = Arc::new(IdentityProvider::new(store.clone(), bus.clone(), [9; 32], "prov"));
    let threads = Arc::new(Threads::new(store.clone(), bus.clone(), clock.clone()));
    let runner = SimRunner::new(dir.path(), NetworkSlot::new()).unwrap();
    let sub = bus.subscribe(TOPIC_THREAD_MESSAGE, "test");
    let orch = Orchestrator::new(
        store,
        bus,
        clock.clone(),
        registry.clone(),
        identity.clone(),
        Arc::new(runner.clone()),
        threads.clone(),
    )
    .unwrap();
    Fixture {
        clock,
        registry,
        identity,
        threads,
        runner,
        orch,
        sub,
        _dir: dir,
    }
}

fn definition(agent_id: &str) -> AgentDefinition {
    AgentDefinition {
        agent_id: agent_id.into(),
        revision: 0,
        system_prompt: "be brief".into(),
        model: "m1".into(),
        main_container: ContainerSpec::new("main", "noop"),
        sidecars: vec![],
        secret_bindings: vec![],
        volumes: vec![VolumeSpec {
            name: "ws".into(),
            mount_path: "/ws".into(),
        }],
        idle_timeout_s: 300,
        keepalive_interval_s: 10,
    }
}

impl Fixture {
    fn post(&self, thread_id: &str, author: &str, text: &str) -> Event {
        self.threads.post_message(thread_id, author, text, None).unwrap();
        let d = self.sub.try_recv().expect("event published");
        self.sub.ack(&d.event.id).unwrap();
        d.event
    }

    fn now(&self) -> Millis {
        self.clock.now_ms()
    }
}

#[test]
fn cold_start_then_warm_path_then_replay() {
    let f = fixture();
    f.registry.put_definition(definition("a")).unwrap();
    let t = f.threads.create_thread("a", "user:alice").unwrap();

    let e1 = f.post(&t.thread_id, "user:alice", "hi");
    let o1 = f.orch.handle_message_event(&e1, f.now()).unwrap();
    assert!(o1.spawned && !o1.forwarded);
    let inst = f.orch.get_instance(o1.instance_id.as_deref().unwrap()).unwrap().unwrap();
    assert_eq!(inst.state, InstanceState::Running);
    assert_eq!(inst.definition_revision, 1);
    assert!(inst.identity_id.is_some() && inst.workload_id.is_some());
    assert_eq!(f.runner.list_workloads().unwrap().len(), 1);

    f.clock.advance_s(5);
    let e2 = f.post(&t.thread_id, "user:alice", "again");
    let o2 = f.orch.handle_message_event(&e2, f.now()).unwrap();
    assert!(o2.forwarded && !o2.spawned);
    assert_eq!(o2.instance_id, o1.instance_id);
    let inst = f.orch.get_instance(&inst.instance_id).unwrap().unwrap();
    assert_eq!(inst.last_active_ts, f.now());

    let o3 = f.orch.handle_message_event(&e2, f.now()).unwrap();
    assert!(o3.noop);
    assert_eq!(f.runner.spawn_count(), 1);
}

#[test]
fn own_replies_do_not_spawn() {
    let f = fixture();
    f.registry.put_definition(definition("a")).unwrap();
    let t = f.threads.create_thread("a", "user:alice").unwrap();
    let e = f.post(&t.thread_id, "agent:a", "reply");
    let o = f.orch.handle_message_event(&e, f.now()).unwrap();
    assert!(o.ignored && !o.spawned);
    assert!(f.orch.list_instances().unwrap().is_empty());
}

#[test]
fn keepalive_max_rule_and_wrong_state() {
    let f = fixture();
    f.registry.put_definition(definition("a")).unwrap();
    let t = f.threads.create_thread("a", "user:alice").unwrap();
    let e = f.post(&t.thread_id, "user:alice", "hi");
    let id = f.orch.handle_message_event(&e, f.now()).unwrap().instance_id.unwrap();
    let base = f.now();
    assert_eq!(f.orch.record_keepalive(&id, base + 42_000).unwrap(), base + 42_000);
    assert_eq!(f.orch.record_keepalive(&id, base + 41_000).unwrap(), base + 42_000);
    assert!(matches!(
        f.orch.record_keepalive("i-nope", base),
        Err(OrchestratorError::UnknownInstance(_))
    ));
    f.orch.sweep_idle(base + 42_000 + 301_000).unwrap();
    assert!(matches!(
        f.orch.record_keepalive(&id, base + 500_000),
        Err(OrchestratorError::WrongState { state: InstanceState::Stopped, .. })
    ));
}

#[test]
fn sweep_boundary_and_cleanup() {
    let f = fixture();
    f.registry.put_definition(definition("a")).unwrap();
    let t1 = f.threads.create_thread("a", "user:alice").unwrap();
    let t2 = f.threads.create_thread("a", "user:alice").unwrap();
    let base = f.now();
    let e1 = f.post(&t1.thread_id, "user:alice", "hi");
    let i1 = f.orch.handle_message_event(&e1, base).unwrap().instance_id.unwrap();
    let e2 = f.post(&t2.thread_id, "user:alice", "hi");
    let i2 = f.orch.handle_message_event(&e2, base).unwrap().instance_id.unwrap();
    let ident1 = f.orch.get_instance(&i1).unwrap().unwrap().identity_id.unwrap();
    f.orch.record_keepalive(&i2, base + 200_000).unwrap();

    assert!(f.orch.sweep_idle(base + 299_000).unwrap().is_empty());
    assert!(f.orch.sweep_idle(base + 300_000).unwrap().is_empty());
    assert_eq!(f.orch.sweep_idle(base + 301_000).unwrap(), vec![i1.clone()]);

    let inst1 = f.orch.get_instance(&i1).unwrap().unwrap();
    assert_eq!(inst1.state, InstanceState::Stopped);
    assert!(inst1.identity_id.is_none() && inst1.workload_id.is_none());
    assert!(f.identity.get(&ident1).unwrap().is_none());
    assert_eq!(
        f.orch.get_instance(&i2).unwrap().unwrap().state,
        InstanceState::Running
    );
    assert!(f
        .runner
        .volume_dir(&volume_name("a", &t1.thread_id, "ws"))
        .is_dir());

    // next message respawns
    let e3 = f.post(&t1.thread_id, "user:alice", "back");
    let o3 = f.orch.handle_message_event(&e3, base + 302_000).unwrap();
    assert!(o3.spawned);
    assert_ne!(o3.instance_id.unwrap(), i1);
}

#[test]
fn unresolved_secret_fails_spawn_cleanly() {
    let f = fixture();
    let mut def = definition("a");
    def.sidecars.push(ContainerSpec::new("mcp", "mock-mcp"));
    def.secret_bindings.push(SecretBinding {
        secret_name: "nope".into(),
        target_container: "mcp".into(),
        env_var: "TOKEN".into(),
    });
    f.registry.put_definition(def).unwrap();
    let t = f.threads.create_thread("a", "user:alice").unwrap();
    let e = f.post(&t.thread_id, "user:alice", "hi");
    let err = f.orch.handle_message_event(&e, f.now()).unwrap_err();
    let OrchestratorError::SpawnFailed { instance_id, reason } = err else {
        panic!("expected SpawnFailed");
    };
    assert!(reason.contains("nope"), "{reason}");
    let inst = f.orch.get_instance(&instance_id).unwrap().unwrap();
    assert_eq!(inst.state, InstanceState::Failed);
    assert!(f.identity.list().unwrap().is_empty());
    assert!(f.orch.live_instance("a", &t.thread_id).unwrap().is_none());
    // the failed event is not retried
    assert!(f.orch.handle_message_event(&e, f.now()).unwrap().noop);
}

#[test]
fn runner_rejection_rolls_back_identity() {
    let f = fixture();
    f.registry.put_definition(definition("a")).unwrap();
    let t = f.threads.create_thread("a", "user:alice").unwrap();
    f.runner.reject_next_creates(1);
    let e = f.post(&t.thread_id, "user:alice", "hi");
    assert!(matches!(
        f.orch.handle_message_event(&e, f.now()),
        Err(OrchestratorError::SpawnFailed { .. })
    ));
    assert!(f.identity.list().unwrap().is_empty());
    let e2 = f.post(&t.thread_id, "user:alice", "retry");
    assert!(f.orch.handle_message_event(&e2, f.now()).unwrap().spawned);
}

#[test]
fn recover_stops_orphans_and_fails_record_only() {
    let f = fixture();
    f.registry.put_definition(definition("a")).unwrap();
    let t1 = f.threads.create_thread("a", "user:alice").unwrap();
    let t2 = f.threads.create_thread("a", "user:alice").unwrap();
    let e1 = f.post(&t1.thread_id, "user:alice", "hi");
    let i1 = f.orch.handle_message_event(&e1, f.now()).unwrap().instance_id.unwrap();
    let e2 = f.post(&t2.thread_id, "user:alice", "hi");
    let i2 = f.orch.handle_message_event(&e2, f.now()).unwrap().instance_id.unwrap();

    assert!(f.orch.recover_from_runner().unwrap().is_empty(), "fixed point");

    let wl2 = f.orch.get_instance(&i2).unwrap().unwrap().workload_id.unwrap();
    f.runner.stop_workload(&wl2).unwrap();
    f.runner
        .create_workload(WorkloadSpec {
            workload_id: "wl-orphan".into(),
            containers: vec![ContainerLaunch {
                name: "main".into(),
                behavior: "noop".into(),
                env: BTreeMap::new(),
                main: true,
            }],
            volume_mounts: vec![],
            identity_token: None,
            thread_context: json!({}),
            labels: BTreeMap::new(),
        })
        .unwrap();

    let actions = f.orch.recover_from_runner().unwrap();
    assert!(actions.contains(&RecoveryAction::Stop {
        workload_id: "wl-orphan".into()
    }));
    assert!(actions.contains(&RecoveryAction::Fail {
        instance_id: i2.clone()
    }));
    assert_eq!(
        f.orch.get_instance(&i2).unwrap().unwrap().state,
        InstanceState::Failed
    );
    assert_eq!(
        f.orch.get_instance(&i1).unwrap().unwrap().state,
        InstanceState::Running
    );
    assert_eq!(f.runner.list_workloads().unwrap().len(), 1);
    assert_eq!(f.identity.list().unwrap().len(), 1);
    assert!(f.orch.recover_from_runner().unwrap().is_empty());

    f.runner.set_available(false);
    assert!(matches!(
        f.orch.recover_from_runner(),
        Err(OrchestratorError::RunnerUnavailable(_))
    ));
}

#[test]
fn restart_free_update_pins_revision() {
    let f = fixture();
    f.registry.put_definition(definition("a")).unwrap();
    let t1 = f.threads.create_thread("a", "user:alice").unwrap();
    let e = f.post(&t1.thread_id, "user:alice", "hi");
    let i1 = f.orch.handle_message_event(&e, f.now()).unwrap().instance_id.unwrap();
    let mut def = definition("a");
    def.system_prompt = "be verbose".into();
    assert_eq!(f.registry.put_definition(def).unwrap(), 2);
    let inst = f.orch.get_instance(&i1).unwrap().unwrap();
    assert_eq!((inst.state, inst.definition_revision), (InstanceState::Running, 1));
    let t2 = f.threads.create_thread("a", "user:alice").unwrap();
    let e2 = f.post(&t2.thread_id, "user:alice", "hi");
    let i2 = f.orch.handle_message_event(&e2, f.now()).unwrap().instance_id.unwrap();
    assert_eq!(f.orch.get_instance(&i2).unwrap().unwrap().definition_revision, 2);
}

#[test]
fn processed_ids_are_bounded() {
    let f = fixture();
    for n in 0..(PROCESSED_RETENTION + 5) {
        f.orch.mark_processed(&format!("ev-{n:06}")).unwrap();
    }
    assert!(!f.orch.is_processed("ev-000000"));
    assert!(f.orch.is_processed(&format!("ev-{:06}", PROCESSED_RETENTION + 4)));
    assert_eq!(f.orch.processed.lock().len(), PROCESSED_RETENTION);
}
