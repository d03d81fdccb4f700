//! Authentication service: the username to public key directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use async_trait::async_trait;
use polis_core::client::MODERATION_USER;
use polis_core::crypto::PublicKey;
use polis_core::directory::{Directory, DirectoryEntry};
use polis_core::mls::validate_username;

use crate::clock::Clock;
use crate::proto::{ops, AdminOrder, Lookup, Register, Request, Response, RevokeOrder, ServiceError};
use crate::transport::Handler;

pub struct AuthService {
    entries: RwLock<BTreeMap<String, DirectoryEntry>>,
    clock: Arc<dyn Clock>,
}

impl AuthService {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self { entries: RwLock::new(BTreeMap::new()), clock }
    }

    pub fn register(&self, req: Register) -> Result<DirectoryEntry, ServiceError> {
        validate_username(&req.username).map_err(|_| ServiceError::InvalidName)?;
        let mut entries = self.entries.write().expect("directory lock");
        if entries.contains_key(&req.username) {
            return Err(ServiceError::NameTaken(req.username));
        }
        let entry = DirectoryEntry {
            username: req.username.clone(),
            sig_pk: req.sig_pk,
            gov_pk: req.gov_pk,
            registered_at: self.clock.now(),
            revoked: false,
        };
        entries.insert(req.username, entry.clone());
        Ok(entry)
    }

    pub fn lookup(&self, username: &str) -> Result<DirectoryEntry, ServiceError> {
        self.entries.read().expect("directory lock").get(username).cloned().ok_or_else(|| ServiceError::NotFound(username.into()))
    }

    /// Marks a user revoked. Only the moderation service may do this.
    pub fn revoke(&self, order: AdminOrder<RevokeOrder>) -> Result<(), ServiceError> {
        let ms = self.moderation_key().ok_or(ServiceError::Unauthorized)?;
        if order.signer != MODERATION_USER || !order.verify(ops::REVOKE, &ms) {
            return Err(ServiceError::Unauthorized);
        }
        let mut entries = self.entries.write().expect("directory lock");
        let e = entries.get_mut(&order.order.username).ok_or_else(|| ServiceError::NotFound(order.order.username.clone()))?;
        e.revoked = true;
        Ok(())
    }

    pub fn moderation_key(&self) -> Option<PublicKey> {
        self.lookup(MODERATION_USER).ok().map(|e| e.sig_pk)
    }

    pub fn snapshot(&self) -> BTreeMap<String, DirectoryEntry> {
        self.entries.read().expect("directory lock").clone()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        crate::store::write_json(path, &self.snapshot())
    }

    pub fn load(path: &Path, clock: Arc<dyn Clock>) -> std::io::Result<Self> {
        let entries = crate::store::read_json(path)?;
        Ok(Self { entries: RwLock::new(entries), clock })
    }
}

impl Directory for AuthService {
    fn lookup(&self, username: &str) -> Option<DirectoryEntry> {
        AuthService::lookup(self, username).ok()
    }
}

#[async_trait]
impl Handler for AuthService {
    async fn handle(&self, req: Request) -> Response {
        match req.op.as_str() {
            ops::REGISTER => Response::from_result(req.parse().and_then(|r| self.register(r))),
            ops::LOOKUP => Response::from_result(req.parse::<Lookup>().and_then(|r| self.lookup(&r.username))),
            ops::REVOKE => Response::from_result(req.parse().and_then(|r| self.revoke(r))),
            _ => Response::from_result::<()>(Err(ServiceError::UnknownOp(req.op))),
        }
    }
}

pub const OPS: &[&str] = &[ops::REGISTER, ops::LOOKUP, ops::REVOKE];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use polis_core::crypto::SigKeyPair;
    use rand_chacha::rand_core::SeedableRng;

    fn setup() -> (AuthService, SigKeyPair, rand_chacha::ChaCha20Rng) {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let auth = AuthService::new(Arc::new(ManualClock::new(100)));
        let ms = SigKeyPair::generate(&mut rng);
        auth.register(Register { username: MODERATION_USER.into(), sig_pk: ms.public, gov_pk: ms.public }).unwrap();
        (auth, ms, rng)
    }

    fn reg(auth: &AuthService, name: &str, rng: &mut rand_chacha::ChaCha20Rng) -> Result<DirectoryEntry, ServiceError> {
        let k = SigKeyPair::generate(rng);
        auth.register(Register { username: name.into(), sig_pk: k.public, gov_pk: k.public })
    }

    #[test]
    fn register_and_lookup() {
        let (auth, _, mut rng) = setup();
        let e = reg(&auth, "alice", &mut rng).unwrap();
        assert_eq!(e.registered_at, 100);
        assert_eq!(auth.lookup("alice").unwrap(), e);
        assert_eq!(auth.lookup("alice").unwrap(), e);
        assert_eq!(reg(&auth, "alice", &mut rng), Err(ServiceError::NameTaken("alice".into())));
        assert_eq!(reg(&auth, "", &mut rng), Err(ServiceError::InvalidName));
        assert_eq!(auth.lookup("bob"), Err(ServiceError::NotFound("bob".into())));
    }

    #[test]
    fn only_moderation_revokes() {
        let (auth, ms, mut rng) = setup();
        let before = reg(&auth, "eve", &mut rng).unwrap();
        let other = SigKeyPair::generate(&mut rng);
        let forged = AdminOrder::sign(ops::REVOKE, MODERATION_USER, 1, RevokeOrder { username: "eve".into() }, &other);
        assert_eq!(auth.revoke(forged), Err(ServiceError::Unauthorized));
        let order = AdminOrder::sign(ops::REVOKE, MODERATION_USER, 1, RevokeOrder { username: "eve".into() }, &ms);
        auth.revoke(order).unwrap();
        let after = auth.lookup("eve").unwrap();
        assert!(after.revoked);
        // Keys are archived, never replaced.
        assert_eq!(after.gov_pk, before.gov_pk);
    }
}
