//! Brute-force relationship oracle, independent of the engine under test.
//!
//! Membership is the least fixpoint of: direct grants, userset expansion,
//! and the agent role chain owner -> maintainer -> participant. Hop
//! distances (userset edges cost 1, role implication 0) are a separate
//! Bellman-Ford fixpoint, used to predict depth-limit failures.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subj {
    Principal(String),
    Userset(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tup {
    pub object: String,
    pub relation: String,
    pub subject: Subj,
}

impl Tup {
    pub fn render(&self) -> String {
        match &self.subject {
            Subj::Principal(p) => format!("{}#{}@{}", self.object, self.relation, p),
            Subj::Userset(o, r) => format!("{}#{}@{}#{}", self.object, self.relation, o, r),
        }
    }
}

pub const AGENT_RELATIONS: [&str; 3] = ["owner", "maintainer", "participant"];
pub const THREAD_RELATIONS: [&str; 1] = ["participant"];

pub fn is_agent(object: &str) -> bool {
    object.starts_with("agent:")
}

pub fn relations_of(object: &str) -> &'static [&'static str] {
    if is_agent(object) {
        &AGENT_RELATIONS
    } else {
        &THREAD_RELATIONS
    }
}

/// Relations that directly include `relation` on the same object.
fn included_by(object: &str, relation: &str) -> &'static [&'static str] {
    match (is_agent(object), relation) {
        (true, "participant") => &["maintainer"],
        (true, "maintainer") => &["owner"],
        _ => &[],
    }
}

/// Permission to relation, per object type.
pub fn relation_of_permission(object: &str, permission: &str) -> &'static str {
    match (is_agent(object), permission) {
        (true, "configure") => "maintainer",
        (true, "delete") => "owner",
        (true, "create_thread") => "participant",
        (true, "owner") => "owner",
        (true, "maintainer") => "maintainer",
        (true, "participant") => "participant",
        (false, "read" | "post" | "participant") => "participant",
        _ => panic!("no mapping for {object} {permission}"),
    }
}

pub fn permissions_of(object: &str) -> &'static [&'static str] {
    if is_agent(object) {
        &["owner", "maintainer", "participant", "configure", "delete", "create_thread"]
    } else {
        &["participant", "read", "post"]
    }
}

type Node = (String, String);

pub struct Oracle {
    tuples: Vec<Tup>,
    dist_cache: RefCell<HashMap<Node, BTreeMap<Node, usize>>>,
    /// (object, relation) -> principals
    members: BTreeMap<(String, String), BTreeSet<String>>,
}

impl Oracle {
    pub fn new(tuples: &[Tup]) -> Self {
        let mut members: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
        loop {
            let mut changed = false;
            for t in tuples {
                let key = (t.object.clone(), t.relation.clone());
                let add: Vec<String> = match &t.subject {
                    Subj::Principal(p) => vec![p.clone()],
                    Subj::Userset(o, r) => members
                        .get(&(o.clone(), r.clone()))
                        .map(|s| s.iter().cloned().collect())
                        .unwrap_or_default(),
                };
                let e = members.entry(key).or_default();
                for p in add {
                    changed |= e.insert(p);
                }
            }
            let keys: Vec<(String, String)> = members.keys().cloned().collect();
            for (o, r) in keys {
                for upper in AGENT_RELATIONS {
                    if is_agent(&o) && included_by(&o, upper).contains(&r.as_str()) {
                        let src = members[&(o.clone(), r.clone())].clone();
                        let dst = members.entry((o.clone(), upper.to_string())).or_default();
                        for p in src {
                            changed |= dst.insert(p);
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        Self {
            tuples: tuples.to_vec(),
            dist_cache: RefCell::new(HashMap::new()),
            members,
        }
    }

    pub fn member(&self, object: &str, permission: &str, principal: &str) -> bool {
        let rel = relation_of_permission(object, permission);
        self.members
            .get(&(object.to_string(), rel.to_string()))
            .is_some_and(|s| s.contains(principal))
    }

    /// Expected engine answer under a depth limit: `Some(b)` or `None` for a
    /// depth failure.
    pub fn expect(&self, object: &str, permission: &str, principal: &str, limit: usize) -> Option<bool> {
        let start = (object.to_string(), relation_of_permission(object, permission).to_string());
        let mut cache = self.dist_cache.borrow_mut();
        let dist = cache.entry(start.clone()).or_insert_with(|| self.distances(start));
        let who = Subj::Principal(principal.to_string());
        let found = dist
            .iter()
            .filter(|((o, r), _)| {
                self.tuples
                    .iter()
                    .any(|t| &t.object == o && &t.relation == r && t.subject == who)
            })
            .map(|(_, d)| *d)
            .min();
        let deepest = dist.values().copied().max().unwrap_or(0);
        match found {
            Some(d) if d <= limit => Some(true),
            _ if deepest > limit => None,
            _ => Some(false),
        }
    }

    /// Bellman-Ford relaxation until no distance improves.
    fn distances(&self, start: Node) -> BTreeMap<Node, usize> {
        let mut edges: Vec<(Node, Node, usize)> = Vec::new();
        for t in &self.tuples {
            if let Subj::Userset(o, r) = &t.subject {
                edges.push(((t.object.clone(), t.relation.clone()), (o.clone(), r.clone()), 1));
            }
        }
        let mut objects: BTreeSet<&str> = self.tuples.iter().map(|t| t.object.as_str()).collect();
        objects.insert(start.0.as_str());
        for t in &self.tuples {
            if let Subj::Userset(o, _) = &t.subject {
                objects.insert(o.as_str());
            }
        }
        for o in objects {
            for r in relations_of(o) {
                for inner in included_by(o, r) {
                    edges.push(((o.to_string(), r.to_string()), (o.to_string(), inner.to_string()), 0));
                }
            }
        }
        let mut dist: BTreeMap<Node, usize> = BTreeMap::new();
        dist.insert(start, 0);
        loop {
            let mut changed = false;
            for (from, to, w) in &edges {
                let Some(d) = dist.get(from).copied() else {
                    continue;
                };
                if dist.get(to).is_none_or(|x| *x > d + w) {
                    dist.insert(to.clone(), d + w);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        dist
    }
}

pub struct GraphGen {
    pub agents: Vec<String>,
    pub threads: Vec<String>,
    pub principals: Vec<String>,
}

impl Default for GraphGen {
    fn default() -> Self {
        Self {
            agents: (0..10).map(|i| format!("agent:a{i}")).collect(),
            threads: (0..10).map(|i| format!("thread:t{i}")).collect(),
            principals: (0..6)
                .map(|i| format!("user:u{i}"))
                .chain((0..4).map(|i| format!("agent:a{i}")))
                .collect(),
        }
    }
}

impl GraphGen {
    pub fn object(&self, rng: &mut impl Rng) -> String {
        if rng.gen_bool(0.5) {
            self.agents.choose(rng).unwrap().clone()
        } else {
            self.threads.choose(rng).unwrap().clone()
        }
    }

    pub fn tuple(&self, rng: &mut impl Rng) -> Tup {
        let object = self.object(rng);
        let relation = relations_of(&object).choose(rng).unwrap().to_string();
        let subject = if rng.gen_bool(0.35) {
            let o = self.object(rng);
            let r = relations_of(&o).choose(rng).unwrap().to_string();
            Subj::Userset(o, r)
        } else {
            Subj::Principal(self.principals.choose(rng).unwrap().clone())
        };
        Tup {
            object,
            relation,
            subject,
        }
    }

    pub fn graph(&self, rng: &mut impl Rng, max: usize) -> Vec<Tup> {
        let n = rng.gen_range(0..=max);
        let mut set = BTreeSet::new();
        for _ in 0..n {
            set.insert(self.tuple(rng));
        }
        set.into_iter().collect()
    }

    /// (object, permission, principal)
    pub fn query(&self, rng: &mut impl Rng) -> (String, String, String) {
        let o = self.object(rng);
        let p = permissions_of(&o).choose(rng).unwrap().to_string();
        let s = self.principals.choose(rng).unwrap().clone();
        (o, p, s)
    }
}
