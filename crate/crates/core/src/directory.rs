//! Identity lookups. Every governance signature check resolves keys through
//! a [`Directory`]; the authentication service is the authority behind it.

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::crypto::PublicKey;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub username: String,
    pub sig_pk: PublicKey,
    pub gov_pk: PublicKey,
    pub registered_at: u64,
    #[serde(default)]
    pub revoked: bool,
}

pub trait Directory {
    fn lookup(&self, username: &str) -> Option<DirectoryEntry>;

    /// Governance key, including archived keys of revoked users.
    fn gov_pk(&self, username: &str) -> Option<PublicKey> {
        self.lookup(username).map(|e| e.gov_pk)
    }

    fn is_revoked(&self, username: &str) -> bool {
        self.lookup(username).is_some_and(|e| e.revoked)
    }
}

impl Directory for BTreeMap<String, DirectoryEntry> {
    fn lookup(&self, username: &str) -> Option<DirectoryEntry> {
        self.get(username).cloned()
    }
}

impl<D: Directory + ?Sized> Directory for &D {
    fn lookup(&self, username: &str) -> Option<DirectoryEntry> {
        (**self).lookup(username)
    }
}
