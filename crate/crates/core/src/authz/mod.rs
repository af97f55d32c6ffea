//! Two authorization layers: deny-by-default dial policies over identity
//! attributes, and relationship checks over tuples.

pub mod rebac;
pub mod tuple;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{Store, StoreError};

pub use rebac::{TupleIndex, DEFAULT_DEPTH_LIMIT};
pub use tuple::{ObjectRef, ObjectType, RelationTuple, Subject};

const TUPLE_PREFIX: &str = "tuple/";
const POLICY_PREFIX: &str = "policy/";

#[derive(Debug, Error)]
pub enum AuthzError {
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("userset expansion exceeded depth limit {0}")]
    DepthExceeded(usize),
    #[error("policy not found: {0}")]
    PolicyNotFound(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

/// Grants dials to `services` for every identity whose attributes contain
/// all `selector` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialPolicy {
    pub policy_id: String,
    pub selector: BTreeMap<String, String>,
    pub services: BTreeSet<String>,
}

impl DialPolicy {
    pub fn matches(&self, attributes: &BTreeMap<String, String>) -> bool {
        self.selector
            .iter()
            .all(|(k, v)| attributes.get(k) == Some(v))
    }
}

pub struct Authz {
    store: Arc<Store>,
    index: RwLock<TupleIndex>,
}

impl std::fmt::Debug for Authz {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Authz")
            .field("tuples", &self.index.read().len())
            .finish()
    }
}

impl Authz {
    /// Loads the tuple set from the store.
    pub fn open(store: Arc<Store>) -> Result<Self, AuthzError> {
        let mut index = TupleIndex::new();
        for rec in store.scan(TUPLE_PREFIX)? {
            let text = &rec.key[TUPLE_PREFIX.len()..];
            index.insert(&text.parse()?);
        }
        Ok(Self {
            store,
            index: RwLock::new(index),
        })
    }

    pub fn write_tuple(&self, t: &RelationTuple) -> Result<(), AuthzError> {
        let mut idx = self.index.write();
        let key = format!("{TUPLE_PREFIX}{t}");
        if !idx.contains(t) {
            self.store.put(&key, b"", None)?;
            idx.insert(t);
        }
        Ok(())
    }

    /// Removes a tuple; absent tuples are ignored.
    pub fn delete_tuple(&self, t: &RelationTuple) -> Result<(), AuthzError> {
        let mut idx = self.index.write();
        let key = format!("{TUPLE_PREFIX}{t}");
        let v = self.store.version(&key);
        if v > 0 {
            self.store.delete(&key, v)?;
        }
        idx.remove(t);
        Ok(())
    }

    pub fn tuples(&self) -> Vec<RelationTuple> {
        self.index.read().tuples()
    }

    pub fn check(
        &self,
        object: &ObjectRef,
        permission: &str,
        subject: &Subject,
    ) -> Result<bool, AuthzError> {
        self.check_with_limit(object, permission, subject, DEFAULT_DEPTH_LIMIT)
    }

    /// Runs under the read lock, so the check sees one consistent tuple set.
    pub fn check_with_limit(
        &self,
        object: &ObjectRef,
        permission: &str,
        subject: &Subject,
        depth_limit: usize,
    ) -> Result<bool, AuthzError> {
        self.index
            .read()
            .check(object, permission, subject, depth_limit)
    }

    /// Makes the creating user and the serving agent participants of a new
    /// thread.
    pub fn grant_defaults_on_thread_create(
        &self,
        thread_id: &str,
        creator: &Subject,
        agent_id: &str,
    ) -> Result<Vec<RelationTuple>, AuthzError> {
        let tuples = vec![
            RelationTuple::new(ObjectRef::thread(thread_id), "participant", creator.clone())?,
            RelationTuple::new(
                ObjectRef::thread(thread_id),
                "participant",
                Subject::agent(agent_id),
            )?,
        ];
        for t in &tuples {
            self.write_tuple(t)?;
        }
        Ok(tuples)
    }

    pub fn put_policy(&self, policy: &DialPolicy) -> Result<(), AuthzError> {
        if policy.policy_id.is_empty() || policy.policy_id.contains('/') {
            return Err(AuthzError::InvalidPolicy("policy_id must be non-empty without '/'".into()));
        }
        if policy.services.is_empty() {
            return Err(AuthzError::InvalidPolicy("services must be non-empty".into()));
        }
        self.store
            .put_json(&format!("{POLICY_PREFIX}{}", policy.policy_id), policy, None)?;
        Ok(())
    }

    pub fn delete_policy(&self, policy_id: &str) -> Result<(), AuthzError> {
        let key = format!("{POLICY_PREFIX}{policy_id}");
        let v = self.store.version(&key);
        if v == 0 {
            return Err(AuthzError::PolicyNotFound(policy_id.to_string()));
        }
        self.store.delete(&key, v)?;
        Ok(())
    }

    pub fn policies(&self) -> Result<Vec<DialPolicy>, AuthzError> {
        Ok(self
            .store
            .scan_json::<DialPolicy>(POLICY_PREFIX)?
            .into_iter()
            .map(|(_, p, _)| p)
            .collect())
    }

    /// True only if some policy matches the attributes and lists the service.
    pub fn dial_allowed(
        &self,
        attributes: &BTreeMap<String, String>,
        service: &str,
    ) -> Result<bool, AuthzError> {
        Ok(self
            .policies()?
            .iter()
            .any(|p| p.services.contains(service) && p.matches(attributes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn authz() -> Authz {
        Authz::open(Arc::new(Store::in_memory())).unwrap()
    }

    fn attrs(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn write_check_delete() {
        let a = authz();
        let t: RelationTuple = "agent:a#owner@user:alice".parse().unwrap();
        a.write_tuple(&t).unwrap();
        assert!(a
            .check(&ObjectRef::agent("a"), "owner", &Subject::user("alice"))
            .unwrap());
        a.delete_tuple(&t).unwrap();
        assert!(!a
            .check(&ObjectRef::agent("a"), "owner", &Subject::user("alice"))
            .unwrap());
    }

    #[test]
    fn tuples_survive_reopen() {
        let store = Arc::new(Store::in_memory());
        let a = Authz::open(store.clone()).unwrap();
        a.write_tuple(&"thread:t1#participant@agent:a#maintainer".parse().unwrap())
            .unwrap();
        let b = Authz::open(store).unwrap();
        assert_eq!(b.tuples().len(), 1);
    }

    #[test]
    fn thread_defaults() {
        let a = authz();
        a.grant_defaults_on_thread_create("t1", &Subject::user("alice"), "a")
            .unwrap();
        let t1 = ObjectRef::thread("t1");
        assert!(a.check(&t1, "post", &Subject::user("alice")).unwrap());
        assert!(a.check(&t1, "post", &Subject::agent("a")).unwrap());
        assert!(!a.check(&t1, "post", &Subject::user("carol")).unwrap());
        assert!(!a.check(&t1, "post", &Subject::agent("b")).unwrap());
    }

    #[test]
    fn dials_denied_without_policies() {
        let a = authz();
        assert!(!a.dial_allowed(&attrs(&[("agent_id", "a")]), "svc1").unwrap());
        assert!(!a.dial_allowed(&BTreeMap::new(), "").unwrap());
    }

    #[test]
    fn dial_policy_matching() {
        let a = authz();
        a.put_policy(&DialPolicy {
            policy_id: "p1".into(),
            selector: attrs(&[("agent_id", "a")]),
            services: BTreeSet::from(["svc1".to_string()]),
        })
        .unwrap();
        let agent_a = attrs(&[("agent_id", "a"), ("thread_id", "t")]);
        assert!(a.dial_allowed(&agent_a, "svc1").unwrap());
        assert!(!a.dial_allowed(&agent_a, "svc2").unwrap());
        assert!(!a.dial_allowed(&attrs(&[("agent_id", "b")]), "svc1").unwrap());
        a.delete_policy("p1").unwrap();
        assert!(!a.dial_allowed(&agent_a, "svc1").unwrap());
        assert!(matches!(a.delete_policy("p1"), Err(AuthzError::PolicyNotFound(_))));
    }

    #[test]
    fn empty_selector_matches_everyone() {
        let a = authz();
        a.put_policy(&DialPolicy {
            policy_id: "open".into(),
            selector: BTreeMap::new(),
            services: BTreeSet::from(["status".to_string()]),
        })
        .unwrap();
        assert!(a.dial_allowed(&attrs(&[("agent_id", "z")]), "status").unwrap());
        assert!(!a.dial_allowed(&attrs(&[("agent_id", "z")]), "db").unwrap());
    }
}
