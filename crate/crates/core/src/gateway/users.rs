//! Static bearer-token user table (`users.json`).

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub name: String,
    pub admin: bool,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct UserEntry {
    pub name: String,
    pub token: String,
    #[serde(default)]
    pub admin: bool,
}

impl std::fmt::Debug for UserEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UserEntry")
            .field("name", &self.name)
            .field("admin", &self.admin)
            .finish_non_exhaustive()
    }
}

#[derive(Deserialize)]
struct UsersFile {
    users: Vec<UserEntry>,
}

/// Tokens are held only as sha256 digests.
#[derive(Clone, Default)]
pub struct UserTable {
    by_token: HashMap<[u8; 32], User>,
}

impl std::fmt::Debug for UserTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut names: Vec<&str> = self.by_token.values().map(|u| u.name.as_str()).collect();
        names.sort();
        f.debug_struct("UserTable").field("users", &names).finish()
    }
}

fn digest(token: &str) -> [u8; 32] {
    Sha256::digest(token.as_bytes()).into()
}

impl UserTable {
    pub fn new(entries: impl IntoIterator<Item = UserEntry>) -> Self {
        Self {
            by_token: entries
                .into_iter()
                .filter(|e| !e.token.is_empty())
                .map(|e| {
                    (
                        digest(&e.token),
                        User {
                            name: e.name,
                            admin: e.admin,
                        },
                    )
                })
                .collect(),
        }
    }

    /// `{"users": [{"name": "alice", "token": "...", "admin": true}]}`
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str::<UsersFile>(text)?.users))
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn authenticate(&self, token: &str) -> Option<User> {
        self.by_token.get(&digest(token)).cloned()
    }

    pub fn by_name(&self, name: &str) -> Option<User> {
        self.by_token.values().find(|u| u.name == name).cloned()
    }
}
