//! Typed clients for the delivery and authentication services, and the
//! local directory cache the governance layer verifies against.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use polis_core::crypto::PublicKey;
use polis_core::directory::{Directory, DirectoryEntry};
use polis_core::mls::{Envelope, KeyPackage};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::proto::*;
use crate::transport::{Transport, TransportError, Traffic};

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

async fn call<T: DeserializeOwned>(t: &dyn Transport, op: &str, body: impl Serialize) -> Result<T, RemoteError> {
    Ok(t.call(&Request::new(op, body)).await?.into_result()?)
}

#[derive(Clone)]
pub struct DsClient {
    transport: Arc<dyn Transport>,
}

impl DsClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self { transport }
    }

    pub fn traffic(&self) -> &Traffic {
        self.transport.traffic()
    }

    pub async fn send_ordered(&self, req: SendOrdered) -> Result<SendOrderedResult, RemoteError> {
        call(&*self.transport, ops::SEND_ORDERED, req).await
    }

    pub async fn send_unordered(&self, req: SendUnordered) -> Result<Delivered, RemoteError> {
        call(&*self.transport, ops::SEND_UNORDERED, req).await
    }

    pub async fn sync(&self, req: SyncRequest) -> Result<SyncResult, RemoteError> {
        call(&*self.transport, ops::SYNC, req).await
    }

    pub async fn publish_key_packages(&self, user: &str, key_packages: Vec<KeyPackage>) -> Result<usize, RemoteError> {
        call(&*self.transport, ops::PUBLISH_KP, PublishKeyPackages { user: user.into(), key_packages }).await
    }

    pub async fn fetch_key_package(&self, username: &str) -> Result<KeyPackage, RemoteError> {
        call(&*self.transport, ops::FETCH_KP, FetchKeyPackage { username: username.into() }).await
    }

    pub async fn welcome(&self, sender: &str, recipient: &str, envelope: Envelope) -> Result<(), RemoteError> {
        call(&*self.transport, ops::WELCOME, RelayWelcome { sender: sender.into(), recipient: recipient.into(), envelope })
            .await
    }

    pub async fn ban(&self, order: AdminOrder<BanOrder>) -> Result<(), RemoteError> {
        call(&*self.transport, ops::BAN, order).await
    }
}

#[derive(Clone)]
pub struct AsClient {
    transport: Arc<dyn Transport>,
}

impl AsClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self { transport }
    }

    pub async fn register(&self, username: &str, sig_pk: PublicKey, gov_pk: PublicKey) -> Result<DirectoryEntry, RemoteError> {
        call(&*self.transport, ops::REGISTER, Register { username: username.into(), sig_pk, gov_pk }).await
    }

    pub async fn lookup(&self, username: &str) -> Result<DirectoryEntry, RemoteError> {
        call(&*self.transport, ops::LOOKUP, Lookup { username: username.into() }).await
    }

    pub async fn revoke(&self, order: AdminOrder<RevokeOrder>) -> Result<(), RemoteError> {
        call(&*self.transport, ops::REVOKE, order).await
    }
}

#[async_trait::async_trait]
impl crate::ds::ModeratorKey for AsClient {
    async fn moderator_key(&self) -> Option<PublicKey> {
        self.lookup(polis_core::client::MODERATION_USER).await.ok().map(|e| e.sig_pk)
    }
}

/// Directory entries fetched from the authentication service. The
/// governance layer is synchronous, so entries are fetched ahead of use.
#[derive(Debug, Clone, Default)]
pub struct DirectoryCache {
    entries: BTreeMap<String, DirectoryEntry>,
}

impl DirectoryCache {
    /// Fetches `always` unconditionally (to pick up revocations) and the
    /// rest only when missing.
    pub async fn refresh(
        &mut self,
        auth: &AsClient,
        always: &BTreeSet<String>,
        if_missing: &BTreeSet<String>,
    ) -> Result<(), TransportError> {
        let wanted = always.iter().chain(if_missing.iter().filter(|u| !self.entries.contains_key(*u)));
        for user in wanted.collect::<BTreeSet<_>>() {
            match auth.lookup(user).await {
                Ok(e) => {
                    self.entries.insert(user.clone(), e);
                }
                Err(RemoteError::Transport(e)) => return Err(e),
                Err(RemoteError::Service(_)) => {}
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, entry: DirectoryEntry) {
        self.entries.insert(entry.username.clone(), entry);
    }

    pub fn entries(&self) -> &BTreeMap<String, DirectoryEntry> {
        &self.entries
    }
}

impl Directory for DirectoryCache {
    fn lookup(&self, username: &str) -> Option<DirectoryEntry> {
        self.entries.get(username).cloned()
    }
}
