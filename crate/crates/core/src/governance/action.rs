//! Signed action messages and the fixed action vocabulary.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canonical;
use crate::crypto::{self, PublicKey, SigKeyPair, Signature};

use super::GovError;

macro_rules! action_types {
    ($($name:ident),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum ActionType {
            $($name,)*
        }

        impl ActionType {
            pub const ALL: &'static [ActionType] = &[$(ActionType::$name,)*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(ActionType::$name => stringify!($name),)*
                }
            }
        }

        impl FromStr for ActionType {
            type Err = GovError;
            fn from_str(s: &str) -> Result<Self, GovError> {
                match s {
                    $(stringify!($name) => Ok(ActionType::$name),)*
                    _ => Err(GovError::UnknownActionType(s.into())),
                }
            }
        }
    };
}

action_types!(
    SendText,
    React,
    RemoveMsg,
    Report,
    Escalate,
    SetState,
    ChangeName,
    ChangeTopic,
    DefRole,
    SetUserRole,
    KickUser,
    InviteUser,
    SetTextFilter,
    PollStart,
    PollVote,
    PollEnd,
    GovStateAnnouncement,
    Accept,
);

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl ActionType {
    /// Content actions touch only content state.
    pub fn is_content(self) -> bool {
        matches!(self, Self::SendText | Self::React | Self::Report)
    }

    /// Whether the action travels as an unordered message. Everything else
    /// is committed as an ordered application message.
    pub fn is_unordered(self) -> bool {
        matches!(
            self,
            Self::SendText
                | Self::React
                | Self::Report
                | Self::Escalate
                | Self::GovStateAnnouncement
                | Self::Accept
                | Self::PollVote
        )
    }

    pub fn all() -> BTreeSet<ActionType> {
        Self::ALL.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionHeader {
    pub sender: String,
    pub action_id: String,
    pub group_id: String,
    pub community_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMessage {
    pub header: ActionHeader,
    pub action_type: ActionType,
    pub payload: Value,
    pub gov_sig_hex: Signature,
}

#[derive(Serialize)]
struct SignedPart<'a> {
    header: &'a ActionHeader,
    action_type: ActionType,
    payload: &'a Value,
}

impl ActionMessage {
    pub fn new(header: ActionHeader, action_type: ActionType, payload: Value, key: &SigKeyPair) -> Self {
        let sig = key.sign(&signed_bytes(&header, action_type, &payload));
        Self { header, action_type, payload, gov_sig_hex: sig }
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        signed_bytes(&self.header, self.action_type, &self.payload)
    }

    pub fn verify(&self, gov_pk: &PublicKey) -> bool {
        crypto::verify(gov_pk, &self.signed_bytes(), &self.gov_sig_hex)
    }

    pub fn sender(&self) -> &str {
        &self.header.sender
    }

    pub fn id(&self) -> &str {
        &self.header.action_id
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, GovError> {
        serde_json::from_value(self.payload.clone()).map_err(|_| GovError::BadPayload(self.action_type))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        canonical::to_vec(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GovError> {
        canonical::from_slice(bytes).map_err(|_| GovError::Malformed)
    }
}

fn signed_bytes(header: &ActionHeader, action_type: ActionType, payload: &Value) -> Vec<u8> {
    canonical::to_vec(&SignedPart { header, action_type, payload })
}

pub fn verify_action(msg: &ActionMessage, gov_pk: &PublicKey) -> bool {
    msg.verify(gov_pk)
}

/// `hex(hash(sender || counter || nonce))`, truncated to 32 hex chars.
pub fn make_action_id(sender: &str, counter: u64, nonce: [u8; 8]) -> String {
    let d = crypto::hash_parts(&[sender.as_bytes(), &counter.to_be_bytes(), &nonce]);
    let mut id = d.to_hex();
    id.truncate(32);
    id
}

/// Typed payloads. Field names are part of the wire format.
pub mod payload {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Text {
        pub text: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct React {
        pub message_id: String,
        pub emoji: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct MessageRef {
        pub message_id: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct SetState {
        pub key: String,
        pub value: Value,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Name {
        pub name: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Topic {
        pub topic: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct DefRole {
        pub role: String,
        pub permissions: BTreeSet<ActionType>,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct SetUserRole {
        pub user: String,
        pub roles: BTreeSet<String>,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct User {
        pub user: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Words {
        pub words: Vec<String>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct PollStart {
        pub target: ActionMessage,
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
    #[serde(rename_all = "lowercase")]
    pub enum Choice {
        Yes,
        No,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct PollVote {
        pub proposal_id: String,
        pub choice: Choice,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct PollEnd {
        pub proposal_id: String,
        pub ballots: Vec<ActionMessage>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Announcement {
        pub state: super::super::GovernanceState,
        pub at_epoch: u64,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Accept {
        pub gov_hash: crate::crypto::Digest32,
    }
}
