//! JSON request/response shapes spoken by the delivery and authentication
//! services. Field names are normative.

use std::collections::BTreeMap;

use polis_core::canonical;
use polis_core::crypto::{self, PublicKey, SigKeyPair, Signature};
use polis_core::directory::DirectoryEntry;
use polis_core::mls::{Envelope, KeyPackage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    #[serde(default)]
    pub body: Value,
}

impl Request {
    pub fn new(op: &str, body: impl Serialize) -> Self {
        Self { op: op.into(), body: serde_json::to_value(body).expect("request bodies serialize") }
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, ServiceError> {
        serde_json::from_value(self.body.clone()).map_err(|e| ServiceError::ParseError(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err: Option<ServiceError>,
}

impl Response {
    pub fn from_result<T: Serialize>(r: Result<T, ServiceError>) -> Self {
        match r {
            Ok(v) => Self { ok: true, body: Some(serde_json::to_value(v).expect("response bodies serialize")), err: None },
            Err(e) => Self { ok: false, body: None, err: Some(e) },
        }
    }

    pub fn into_result<T: DeserializeOwned>(self) -> Result<T, ServiceError> {
        match (self.ok, self.err) {
            (true, _) => serde_json::from_value(self.body.unwrap_or(Value::Null))
                .map_err(|e| ServiceError::ParseError(e.to_string())),
            (false, Some(e)) => Err(e),
            (false, None) => Err(ServiceError::ParseError("error response without err".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "code", content = "detail")]
pub enum ServiceError {
    #[error("unknown op {0:?}")]
    UnknownOp(String),
    #[error("malformed request: {0}")]
    ParseError(String),
    #[error("{0} is banned")]
    Banned(String),
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("{0} is not a member of the group")]
    NotAMember(String),
    #[error("no key packages left for {0}")]
    Exhausted(String),
    #[error("key package does not verify")]
    BadKeyPackage,
    #[error("name {0:?} is taken")]
    NameTaken(String),
    #[error("invalid username")]
    InvalidName,
    #[error("{0:?} not found")]
    NotFound(String),
    #[error("unauthorized")]
    Unauthorized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendOrdered {
    pub sender: String,
    pub group_id: String,
    pub envelope: Envelope,
    /// Highest seq the sender has processed; the backlog starts after it.
    pub last_acked: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SendOrderedResult {
    Accepted { seq: u64, backlog: Vec<Envelope> },
    RejectedConflict { backlog: Vec<Envelope> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendUnordered {
    pub sender: String,
    /// `None` addresses every member the server has seen join the group.
    pub recipients: Option<Vec<String>>,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivered {
    pub delivered: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncRequest {
    pub user: String,
    pub last_acked: BTreeMap<String, Option<u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncResult {
    pub ordered: BTreeMap<String, Vec<Envelope>>,
    pub unordered: Vec<Envelope>,
}

impl SyncResult {
    pub fn is_empty(&self) -> bool {
        self.unordered.is_empty() && self.ordered.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.unordered.len() + self.ordered.values().map(Vec::len).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishKeyPackages {
    pub user: String,
    pub key_packages: Vec<KeyPackage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchKeyPackage {
    pub username: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayWelcome {
    pub sender: String,
    pub recipient: String,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub username: String,
    pub sig_pk: PublicKey,
    pub gov_pk: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lookup {
    pub username: String,
}

pub type LookupResult = DirectoryEntry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanOrder {
    pub username: String,
    /// Unix seconds; `None` bans indefinitely.
    pub until: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevokeOrder {
    pub username: String,
}

/// An order from the moderation service, signed with its registered
/// signature key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminOrder<T> {
    pub signer: String,
    pub issued_at: u64,
    pub order: T,
    pub sig: Signature,
}

#[derive(Serialize)]
struct AdminTbs<'a, T> {
    op: &'a str,
    signer: &'a str,
    issued_at: u64,
    order: &'a T,
}

impl<T: Serialize> AdminOrder<T> {
    pub fn sign(op: &str, signer: &str, issued_at: u64, order: T, key: &SigKeyPair) -> Self {
        let sig = key.sign(&canonical::to_vec(&AdminTbs { op, signer, issued_at, order: &order }));
        Self { signer: signer.into(), issued_at, order, sig }
    }

    pub fn verify(&self, op: &str, key: &PublicKey) -> bool {
        let tbs = AdminTbs { op, signer: &self.signer, issued_at: self.issued_at, order: &self.order };
        crypto::verify(key, &canonical::to_vec(&tbs), &self.sig)
    }
}

pub mod ops {
    pub const SEND_ORDERED: &str = "send_ordered";
    pub const SEND_UNORDERED: &str = "send_unordered";
    pub const SYNC: &str = "sync";
    pub const PUBLISH_KP: &str = "publish_kp";
    pub const FETCH_KP: &str = "fetch_kp";
    pub const WELCOME: &str = "welcome";
    pub const BAN: &str = "ban";
    pub const REGISTER: &str = "register";
    pub const LOOKUP: &str = "lookup";
    pub const REVOKE: &str = "revoke";
}
