//! Relation tuples, the built-in relation schema, and the textual tuple form
//! `object#relation@subject`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AuthzError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectType {
    Agent,
    Thread,
}

impl ObjectType {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectType::Agent => "agent",
            ObjectType::Thread => "thread",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "agent" => Some(ObjectType::Agent),
            "thread" => Some(ObjectType::Thread),
            _ => None,
        }
    }

    /// Relations declared for this type.
    pub fn relations(self) -> &'static [&'static str] {
        match self {
            ObjectType::Agent => &["owner", "maintainer", "participant"],
            ObjectType::Thread => &["participant"],
        }
    }

    /// Relations whose members are also members of `relation` on the same
    /// object (the computed-userset part of the rewrite; direct membership
    /// is always included).
    pub fn implied_by(self, relation: &str) -> &'static [&'static str] {
        match (self, relation) {
            (ObjectType::Agent, "maintainer") => &["owner"],
            (ObjectType::Agent, "participant") => &["maintainer"],
            _ => &[],
        }
    }

    /// Maps a permission to the relation that grants it. Relation names map
    /// to themselves.
    pub fn relation_for(self, permission: &str) -> Option<&'static str> {
        let mapped = match (self, permission) {
            (ObjectType::Agent, "configure") => "maintainer",
            (ObjectType::Agent, "delete") => "owner",
            (ObjectType::Agent, "create_thread") => "participant",
            (ObjectType::Thread, "read") => "participant",
            (ObjectType::Thread, "post") => "participant",
            _ => return self.relations().iter().copied().find(|r| *r == permission),
        };
        Some(mapped)
    }
}

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && !s
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, ':' | '#' | '@' | '/'))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectRef {
    pub kind: ObjectType,
    pub id: String,
}

impl ObjectRef {
    pub fn agent(id: impl Into<String>) -> Self {
        Self {
            kind: ObjectType::Agent,
            id: id.into(),
        }
    }

    pub fn thread(id: impl Into<String>) -> Self {
        Self {
            kind: ObjectType::Thread,
            id: id.into(),
        }
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.id)
    }
}

impl FromStr for ObjectRef {
    type Err = AuthzError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, id) = s
            .split_once(':')
            .ok_or_else(|| AuthzError::Parse(format!("object {s:?} is not type:id")))?;
        let kind = ObjectType::parse(kind)
            .ok_or_else(|| AuthzError::SchemaViolation(format!("unknown object type {kind:?}")))?;
        if !valid_id(id) {
            return Err(AuthzError::Parse(format!("invalid object id {id:?}")));
        }
        Ok(Self {
            kind,
            id: id.to_string(),
        })
    }
}

/// Who a tuple grants to: a concrete principal (`user:alice`,
/// `agent:support-bot`) or every member of another object's relation
/// (`agent:support-bot#maintainer`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subject {
    Principal { kind: String, id: String },
    Userset { object: ObjectRef, relation: String },
}

impl Subject {
    pub fn user(id: impl Into<String>) -> Self {
        Subject::Principal {
            kind: "user".into(),
            id: id.into(),
        }
    }

    pub fn agent(id: impl Into<String>) -> Self {
        Subject::Principal {
            kind: "agent".into(),
            id: id.into(),
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Principal { kind, id } => write!(f, "{kind}:{id}"),
            Subject::Userset { object, relation } => write!(f, "{object}#{relation}"),
        }
    }
}

impl FromStr for Subject {
    type Err = AuthzError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((obj, relation)) = s.split_once('#') {
            let object: ObjectRef = obj.parse()?;
            if !object.kind.relations().contains(&relation) {
                return Err(AuthzError::SchemaViolation(format!(
                    "relation {relation:?} not declared on {}",
                    object.kind.as_str()
                )));
            }
            return Ok(Subject::Userset {
                object,
                relation: relation.to_string(),
            });
        }
        let (kind, id) = s
            .split_once(':')
            .ok_or_else(|| AuthzError::Parse(format!("subject {s:?} is not type:id")))?;
        if !matches!(kind, "user" | "agent") {
            return Err(AuthzError::SchemaViolation(format!(
                "subject type {kind:?} must be user or agent"
            )));
        }
        if !valid_id(id) {
            return Err(AuthzError::Parse(format!("invalid subject id {id:?}")));
        }
        Ok(Subject::Principal {
            kind: kind.to_string(),
            id: id.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationTuple {
    pub object: ObjectRef,
    pub relation: String,
    pub subject: Subject,
}

impl RelationTuple {
    pub fn new(object: ObjectRef, relation: &str, subject: Subject) -> Result<Self, AuthzError> {
        if !object.kind.relations().contains(&relation) {
            return Err(AuthzError::SchemaViolation(format!(
                "relation {relation:?} not declared on {}",
                object.kind.as_str()
            )));
        }
        Ok(Self {
            object,
            relation: relation.to_string(),
            subject,
        })
    }
}

impl fmt::Display for RelationTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}@{}", self.object, self.relation, self.subject)
    }
}

impl FromStr for RelationTuple {
    type Err = AuthzError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lhs, subject) = s
            .split_once('@')
            .ok_or_else(|| AuthzError::Parse(format!("tuple {s:?} lacks '@subject'")))?;
        let (object, relation) = lhs
            .split_once('#')
            .ok_or_else(|| AuthzError::Parse(format!("tuple {s:?} lacks '#relation'")))?;
        RelationTuple::new(object.parse()?, relation, subject.parse()?)
    }
}

impl Serialize for RelationTuple {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RelationTuple {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        for text in [
            "agent:a#owner@user:alice",
            "thread:t1#participant@agent:a#maintainer",
            "thread:t1#participant@agent:support-bot",
        ] {
            let t: RelationTuple = text.parse().unwrap();
            assert_eq!(t.to_string(), text);
        }
    }

    #[test]
    fn schema_violations() {
        assert!(matches!(
            "agent:a#boss@user:alice".parse::<RelationTuple>(),
            Err(AuthzError::SchemaViolation(_))
        ));
        assert!(matches!(
            "thread:t#owner@user:alice".parse::<RelationTuple>(),
            Err(AuthzError::SchemaViolation(_))
        ));
        assert!(matches!(
            "doc:x#owner@user:alice".parse::<RelationTuple>(),
            Err(AuthzError::SchemaViolation(_))
        ));
        assert!(matches!(
            "agent:a#owner@agent:b#boss".parse::<RelationTuple>(),
            Err(AuthzError::SchemaViolation(_))
        ));
        assert!("agent:a#owner".parse::<RelationTuple>().is_err());
        assert!("agent:#owner@user:x".parse::<RelationTuple>().is_err());
    }

    #[test]
    fn permission_mapping() {
        assert_eq!(ObjectType::Agent.relation_for("configure"), Some("maintainer"));
        assert_eq!(ObjectType::Agent.relation_for("delete"), Some("owner"));
        assert_eq!(ObjectType::Thread.relation_for("post"), Some("participant"));
        assert_eq!(ObjectType::Thread.relation_for("owner"), None);
        assert_eq!(ObjectType::Agent.relation_for("owner"), Some("owner"));
    }
}
