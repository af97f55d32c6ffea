//! Shared fixtures: an orchestrator on a manual clock, and a random agent
//! definition generator.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use agynlite::clock::{Clock, ManualClock};
use agynlite::events::{Event, EventBus, Subscription, TOPIC_THREAD_MESSAGE};
use agynlite::identity::IdentityProvider;
use agynlite::orchestrator::{Instance, Orchestrator, ReconcileOutcome};
use agynlite::registry::{AgentDefinition, ContainerSpec, Registry, Sealer, SecretBinding, VolumeSpec};
use agynlite::runner::{NetworkSlot, Runner, SimRunner};
use agynlite::store::Store;
use agynlite::threads::Threads;
use rand::seq::SliceRandom;
use rand::Rng;

pub struct World {
    pub store: Arc<Store>,
    pub clock: Arc<ManualClock>,
    pub bus: Arc<EventBus>,
    pub registry: Arc<Registry>,
    pub identity: Arc<IdentityProvider>,
    pub threads: Arc<Threads>,
    pub runner: SimRunner,
    pub orch: Orchestrator,
    pub sub: Subscription,
    pub dir: tempfile::TempDir,
}

impl World {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let runner = SimRunner::new(dir.path(), NetworkSlot::new()).unwrap();
        Self::with_runner(dir, runner)
    }

    pub fn with_runner(dir: tempfile::TempDir, runner: SimRunner) -> Self {
        let store = Arc::new(Store::in_memory());
        let clock = ManualClock::new(1_000_000);
        let bus = EventBus::open(store.clone(), clock.clone(), 5_000).unwrap();
        let registry = Arc::new(Registry::new(store.clone(), bus.clone(), clock.clone(), Sealer::new([7; 32])));
        let identity = Arc::new(IdentityProvider::new(store.clone(), bus.clone(), [9; 32], "prov"));
        let threads = Arc::new(Threads::new(store.clone(), bus.clone(), clock.clone()));
        let sub = bus.subscribe(TOPIC_THREAD_MESSAGE, "test");
        let orch = Orchestrator::new(
            store.clone(),
            bus.clone(),
            clock.clone(),
            registry.clone(),
            identity.clone(),
            Arc::new(runner.clone()),
            threads.clone(),
        )
        .unwrap();
        Self {
            store,
            clock,
            bus,
            registry,
            identity,
            threads,
            runner,
            orch,
            sub,
            dir,
        }
    }

    pub fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Posts as a user and returns the published event.
    pub fn post(&self, thread_id: &str, text: &str) -> Event {
        self.threads
            .post_message(thread_id, "user:alice", text, None)
            .unwrap();
        let d = self.sub.try_recv().expect("message event");
        self.sub.ack(&d.event.id).unwrap();
        d.event
    }

    pub fn message(&self, thread_id: &str, text: &str) -> ReconcileOutcome {
        let e = self.post(thread_id, text);
        self.orch.handle_message_event(&e, self.now()).unwrap()
    }

    pub fn instances(&self) -> Vec<Instance> {
        self.orch.list_instances().unwrap()
    }

    pub fn live(&self, agent: &str, thread: &str) -> Option<Instance> {
        self.orch.live_instance(agent, thread).unwrap()
    }
}

impl Drop for World {
    fn drop(&mut self) {
        if let Ok(all) = self.runner.list_workloads() {
            for w in all {
                let _ = self.runner.stop_workload(&w.workload_id);
            }
        }
    }
}

pub fn simple_definition(agent_id: &str, behavior: &str, idle_s: u64) -> AgentDefinition {
    AgentDefinition {
        agent_id: agent_id.into(),
        revision: 0,
        system_prompt: "be brief".into(),
        model: "m1".into(),
        main_container: ContainerSpec::new("main", behavior),
        sidecars: vec![],
        secret_bindings: vec![],
        volumes: vec![VolumeSpec {
            name: "ws".into(),
            mount_path: "/workspace".into(),
        }],
        idle_timeout_s: idle_s,
        keepalive_interval_s: 1,
    }
}

/// A definition with 1-5 sidecars and 0-8 bindings, plus the secret values
/// its bindings need (and a few unbound decoys).
pub struct RandomAgent {
    pub definition: AgentDefinition,
    pub secrets: BTreeMap<String, String>,
}

impl RandomAgent {
    pub fn generate(rng: &mut impl Rng, agent_id: &str) -> Self {
        let sidecars: Vec<ContainerSpec> = (0..rng.gen_range(1..=5))
            .map(|i| ContainerSpec::new(format!("side{i}"), "noop"))
            .collect();
        let names: Vec<String> = std::iter::once("main".to_string())
            .chain(sidecars.iter().map(|c| c.name.clone()))
            .collect();
        let secret_names: Vec<String> = (0..rng.gen_range(1..=6))
            .map(|i| format!("{agent_id}-s{i}"))
            .collect();
        let secrets: BTreeMap<String, String> = secret_names
            .iter()
            .map(|n| (n.clone(), format!("v{:032x}", rng.gen::<u128>())))
            .collect();
        let bindings = (0..rng.gen_range(0..=8))
            .map(|i| SecretBinding {
                secret_name: secret_names.choose(rng).unwrap().clone(),
                target_container: names.choose(rng).unwrap().clone(),
                env_var: format!("SECRET_{i}"),
            })
            .collect();
        let mut definition = simple_definition(agent_id, "noop", 300);
        definition.sidecars = sidecars;
        definition.secret_bindings = bindings;
        if rng.gen_bool(0.3) {
            definition.main_container.env.insert("PLAIN".into(), "not-secret".into());
        }
        Self { definition, secrets }
    }
}
