#[path = "support/rebac_oracle.rs"]
mod oracle;

use std::sync::Arc;

use agynlite::authz::{Authz, AuthzError, DialPolicy, ObjectRef, RelationTuple, Subject, DEFAULT_DEPTH_LIMIT};
use agynlite::store::Store;
use oracle::{GraphGen, Oracle, Tup, AGENT_RELATIONS};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn engine(tuples: &[Tup]) -> Authz {
    let a = Authz::open(Arc::new(Store::in_memory())).unwrap();
    for t in tuples {
        let parsed: RelationTuple = t.render().parse().unwrap();
        a.write_tuple(&parsed).unwrap();
    }
    a
}

fn run(a: &Authz, o: &str, p: &str, s: &str, limit: usize) -> Option<bool> {
    let obj: ObjectRef = o.parse().unwrap();
    let subj: Subject = s.parse().unwrap();
    match a.check_with_limit(&obj, p, &subj, limit) {
        Ok(b) => Some(b),
        Err(AuthzError::DepthExceeded(_)) => None,
        Err(e) => panic!("{o} {p} {s}: {e}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn agrees_with_fixpoint_oracle(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let gen = GraphGen::default();
        let tuples = gen.graph(&mut rng, 100);
        let a = engine(&tuples);
        let o = Oracle::new(&tuples);
        for _ in 0..50 {
            let (obj, perm, subj) = gen.query(&mut rng);
            let expected = o.expect(&obj, &perm, &subj, DEFAULT_DEPTH_LIMIT);
            prop_assert_eq!(run(&a, &obj, &perm, &subj, DEFAULT_DEPTH_LIMIT), expected, "{} {} {}", obj, perm, subj);
            if let Some(b) = expected {
                prop_assert_eq!(b, o.member(&obj, &perm, &subj));
            }
        }
    }

    #[test]
    fn depth_limit_matches_hop_distance(seed in any::<u64>(), limit in 0usize..4) {
        let mut rng = StdRng::seed_from_u64(seed);
        let gen = GraphGen::default();
        let tuples = gen.graph(&mut rng, 60);
        let a = engine(&tuples);
        let o = Oracle::new(&tuples);
        for _ in 0..30 {
            let (obj, perm, subj) = gen.query(&mut rng);
            prop_assert_eq!(run(&a, &obj, &perm, &subj, limit), o.expect(&obj, &perm, &subj, limit));
        }
    }

    #[test]
    fn role_implication_chain(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let gen = GraphGen::default();
        let tuples = gen.graph(&mut rng, 100);
        let a = engine(&tuples);
        for agent in &gen.agents {
            for s in &gen.principals {
                let r: Vec<Option<bool>> = AGENT_RELATIONS
                    .iter()
                    .map(|rel| run(&a, agent, rel, s, DEFAULT_DEPTH_LIMIT))
                    .collect();
                if r[0] == Some(true) {
                    prop_assert_eq!(r[1], Some(true));
                }
                if r[1] == Some(true) {
                    prop_assert_eq!(r[2], Some(true));
                }
            }
        }
    }

    #[test]
    fn adding_never_revokes_and_deleting_never_grants(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let gen = GraphGen::default();
        let tuples = gen.graph(&mut rng, 60);
        let a = engine(&tuples);
        let queries: Vec<_> = (0..40).map(|_| gen.query(&mut rng)).collect();
        let before: Vec<_> = queries.iter().map(|(o, p, s)| run(&a, o, p, s, DEFAULT_DEPTH_LIMIT)).collect();

        let extra: RelationTuple = gen.tuple(&mut rng).render().parse().unwrap();
        let existed = a.tuples().contains(&extra);
        a.write_tuple(&extra).unwrap();
        let added: Vec<_> = queries.iter().map(|(o, p, s)| run(&a, o, p, s, DEFAULT_DEPTH_LIMIT)).collect();
        for (b, x) in before.iter().zip(&added) {
            if *b == Some(true) {
                prop_assert_eq!(*x, Some(true));
            }
        }

        if !existed {
            a.delete_tuple(&extra).unwrap();
        }
        let live = a.tuples();
        if !live.is_empty() {
            let victim = live[rng.gen_range(0..live.len())].clone();
            let pre: Vec<_> = queries.iter().map(|(o, p, s)| run(&a, o, p, s, DEFAULT_DEPTH_LIMIT)).collect();
            a.delete_tuple(&victim).unwrap();
            let post: Vec<_> = queries.iter().map(|(o, p, s)| run(&a, o, p, s, DEFAULT_DEPTH_LIMIT)).collect();
            for (b, x) in pre.iter().zip(&post) {
                if *b == Some(false) {
                    prop_assert_ne!(*x, Some(true));
                }
            }
        }
    }

    #[test]
    fn no_policy_allows_no_dial(
        attrs in proptest::collection::btree_map("[a-z_]{1,8}", "[a-z0-9-]{0,8}", 0..6),
        service in "[a-z-]{1,12}",
    ) {
        let a = Authz::open(Arc::new(Store::in_memory())).unwrap();
        prop_assert!(!a.dial_allowed(&attrs, &service).unwrap());
    }

    #[test]
    fn policy_allows_exactly_superset_attributes(
        selector in proptest::collection::btree_map("[a-c]", "[x-z]", 0..3),
        attrs in proptest::collection::btree_map("[a-d]", "[x-z]", 0..4),
        service in "(kv|search|mail)",
    ) {
        let a = Authz::open(Arc::new(Store::in_memory())).unwrap();
        a.put_policy(&DialPolicy {
            policy_id: "p".into(),
            selector: selector.clone(),
            services: ["kv".to_string()].into(),
        }).unwrap();
        let expected = service == "kv" && selector.iter().all(|(k, v)| attrs.get(k) == Some(v));
        prop_assert_eq!(a.dial_allowed(&attrs, &service).unwrap(), expected);
        a.delete_policy("p").unwrap();
        prop_assert!(!a.dial_allowed(&attrs, &service).unwrap());
    }
}

#[test]
fn worked_example_from_userset() {
    let a = engine(&[]);
    for t in ["thread:t1#participant@agent:a#maintainer", "agent:a#owner@user:bob"] {
        a.write_tuple(&t.parse().unwrap()).unwrap();
    }
    assert_eq!(run(&a, "thread:t1", "participant", "user:bob", DEFAULT_DEPTH_LIMIT), Some(true));
    assert_eq!(run(&a, "thread:t1", "participant", "user:bob", 0), None);
}
