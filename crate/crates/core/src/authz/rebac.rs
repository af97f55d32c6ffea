//! Relationship check by graph traversal.
//!
//! Nodes are `(object, relation)` pairs. A node's members are its direct
//! subjects, the members of relations that imply it on the same object
//! (free edges), and the members of any userset subject (one hop each). The
//! schema is union-only, so membership is plain reachability: the search
//! visits each node once, in order of userset-hop distance, and fails loudly
//! when reachable nodes lie beyond the depth limit.

use std::collections::{HashMap, HashSet, VecDeque};

use super::tuple::{ObjectRef, RelationTuple, Subject};
use super::AuthzError;

pub const DEFAULT_DEPTH_LIMIT: usize = 16;

type Node = (ObjectRef, String);

/// Tuples indexed by `(object, relation)`.
#[derive(Debug, Default, Clone)]
pub struct TupleIndex {
    by_node: HashMap<Node, HashSet<Subject>>,
    len: usize,
}

impl TupleIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tuples<'a>(tuples: impl IntoIterator<Item = &'a RelationTuple>) -> Self {
        let mut idx = Self::new();
        for t in tuples {
            idx.insert(t);
        }
        idx
    }

    pub fn insert(&mut self, t: &RelationTuple) -> bool {
        let added = self
            .by_node
            .entry((t.object.clone(), t.relation.clone()))
            .or_default()
            .insert(t.subject.clone());
        if added {
            self.len += 1;
        }
        added
    }

    pub fn remove(&mut self, t: &RelationTuple) -> bool {
        let key = (t.object.clone(), t.relation.clone());
        let Some(set) = self.by_node.get_mut(&key) else {
            return false;
        };
        let removed = set.remove(&t.subject);
        if set.is_empty() {
            self.by_node.remove(&key);
        }
        if removed {
            self.len -= 1;
        }
        removed
    }

    pub fn contains(&self, t: &RelationTuple) -> bool {
        self.by_node
            .get(&(t.object.clone(), t.relation.clone()))
            .is_some_and(|s| s.contains(&t.subject))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tuples(&self) -> Vec<RelationTuple> {
        let mut out: Vec<RelationTuple> = self
            .by_node
            .iter()
            .flat_map(|((object, relation), subjects)| {
                subjects.iter().map(move |s| RelationTuple {
                    object: object.clone(),
                    relation: relation.clone(),
                    subject: s.clone(),
                })
            })
            .collect();
        out.sort();
        out
    }

    /// Is `subject` a member of `permission` (or relation) on `object`?
    pub fn check(
        &self,
        object: &ObjectRef,
        permission: &str,
        subject: &Subject,
        depth_limit: usize,
    ) -> Result<bool, AuthzError> {
        let relation = object.kind.relation_for(permission).ok_or_else(|| {
            AuthzError::SchemaViolation(format!(
                "{permission:?} is neither a relation nor a permission on {}",
                object.kind.as_str()
            ))
        })?;

        // 0-1 BFS: implied relations cost nothing, userset hops cost one
        let mut best: HashMap<Node, usize> = HashMap::new();
        let mut done: HashSet<Node> = HashSet::new();
        let mut queue: VecDeque<(Node, usize)> = VecDeque::new();
        let start = (object.clone(), relation.to_string());
        best.insert(start.clone(), 0);
        queue.push_back((start, 0));

        while let Some((node, depth)) = queue.pop_front() {
            if done.contains(&node) || best.get(&node).is_some_and(|b| *b < depth) {
                continue;
            }
            if depth > depth_limit {
                return Err(AuthzError::DepthExceeded(depth_limit));
            }
            done.insert(node.clone());
            let (obj, rel) = &node;

            for implied in obj.kind.implied_by(rel) {
                let next = (obj.clone(), implied.to_string());
                if best.get(&next).is_none_or(|b| *b > depth) {
                    best.insert(next.clone(), depth);
                    queue.push_front((next, depth));
                }
            }

            let Some(subjects) = self.by_node.get(&node) else {
                continue;
            };
            if subjects.contains(subject) {
                return Ok(true);
            }
            for s in subjects {
                if let Subject::Userset { object, relation } = s {
                    let next = (object.clone(), relation.clone());
                    if best.get(&next).is_none_or(|b| *b > depth + 1) {
                        best.insert(next.clone(), depth + 1);
                        queue.push_back((next, depth + 1));
                    }
                }
            }
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(tuples: &[&str]) -> TupleIndex {
        let parsed: Vec<RelationTuple> = tuples.iter().map(|t| t.parse().unwrap()).collect();
        TupleIndex::from_tuples(&parsed)
    }

    fn check(i: &TupleIndex, obj: &str, perm: &str, subj: &str) -> Result<bool, AuthzError> {
        i.check(&obj.parse().unwrap(), perm, &subj.parse().unwrap(), DEFAULT_DEPTH_LIMIT)
    }

    #[test]
    fn owner_implies_participant() {
        let i = idx(&["agent:a#owner@user:alice"]);
        assert!(check(&i, "agent:a", "participant", "user:alice").unwrap());
        assert!(check(&i, "agent:a", "configure", "user:alice").unwrap());
        assert!(check(&i, "agent:a", "create_thread", "user:alice").unwrap());
        assert!(!check(&i, "agent:a", "participant", "user:bob").unwrap());
    }

    #[test]
    fn maintainer_does_not_imply_owner() {
        let i = idx(&["agent:a#maintainer@user:m"]);
        assert!(check(&i, "agent:a", "configure", "user:m").unwrap());
        assert!(!check(&i, "agent:a", "delete", "user:m").unwrap());
    }

    #[test]
    fn userset_expansion_through_agent_roles() {
        let i = idx(&[
            "thread:t1#participant@agent:a#maintainer",
            "agent:a#owner@user:bob",
        ]);
        assert!(check(&i, "thread:t1", "participant", "user:bob").unwrap());
        assert!(check(&i, "thread:t1", "post", "user:bob").unwrap());
        assert!(!check(&i, "thread:t1", "read", "user:alice").unwrap());
    }

    #[test]
    fn empty_index_denies() {
        let i = TupleIndex::new();
        assert!(!check(&i, "thread:t1", "read", "user:alice").unwrap());
    }

    #[test]
    fn cycles_terminate() {
        let i = idx(&[
            "agent:a#owner@agent:b#owner",
            "agent:b#owner@agent:a#owner",
        ]);
        assert!(!check(&i, "agent:a", "participant", "user:x").unwrap());
    }

    #[test]
    fn unknown_permission_is_schema_violation() {
        let i = TupleIndex::new();
        assert!(matches!(
            check(&i, "thread:t1", "delete", "user:x"),
            Err(AuthzError::SchemaViolation(_))
        ));
    }

    #[test]
    fn long_chains_exceed_depth() {
        // agent:n0#owner <- agent:n1#owner <- ... <- user:z at the far end
        let mut tuples: Vec<String> = (0..20)
            .map(|k| format!("agent:n{k}#owner@agent:n{}#owner", k + 1))
            .collect();
        tuples.push("agent:n20#owner@user:z".into());
        let refs: Vec<&str> = tuples.iter().map(String::as_str).collect();
        let i = idx(&refs);
        assert!(matches!(
            check(&i, "agent:n0", "owner", "user:z"),
            Err(AuthzError::DepthExceeded(16))
        ));
        // reachable within the limit from further down the chain
        assert!(check(&i, "agent:n10", "owner", "user:z").unwrap());
        // a large enough limit succeeds
        assert!(i
            .check(&"agent:n0".parse().unwrap(), "owner", &"user:z".parse().unwrap(), 32)
            .unwrap());
    }

    #[test]
    fn index_bookkeeping() {
        let mut i = TupleIndex::new();
        let t: RelationTuple = "agent:a#owner@user:x".parse().unwrap();
        assert!(i.insert(&t));
        assert!(!i.insert(&t));
        assert_eq!(i.len(), 1);
        assert!(i.contains(&t));
        assert!(i.remove(&t));
        assert!(!i.remove(&t));
        assert!(i.is_empty());
    }
}
