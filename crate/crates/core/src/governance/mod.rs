//! Client-side governance: signed actions, the replicated governance state,
//! role checks, the policy engine and abuse reports.

pub mod action;
pub mod announce;
mod engine;
pub mod report;
pub mod state;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::directory::Directory;

pub use action::{make_action_id, verify_action, ActionHeader, ActionMessage, ActionType};
pub use announce::{accept_group, check_accept, AcceptCheck};
pub use engine::{apply_action, evaluate, on_member_added, on_member_removed};
pub use report::{build_report, verify_report, Report};
pub use state::{
    init_governance_state, rbac_check, state_hash, ContentState, GovernanceState, PendingProposal,
    StoredMessage,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GovError {
    #[error("unknown action type {0:?}")]
    UnknownActionType(String),
    #[error("malformed payload for {0}")]
    BadPayload(ActionType),
    #[error("malformed action message")]
    Malformed,
    #[error("unknown target {0:?}")]
    UnknownTarget(String),
    #[error("{0:?} is already a member")]
    AlreadyMember(String),
    #[error("duplicate proposal {0:?}")]
    DuplicateProposal(String),
    #[error("unknown message id {0:?}")]
    UnknownMessageId(String),
    #[error("report has no messages")]
    EmptyReport,
    #[error("reported messages come from different senders")]
    MixedSenders,
    #[error("announcement for epoch {got}, joined at {expected}")]
    EpochMismatch { expected: u64, got: u64 },
    #[error("key {0:?} cannot be set directly")]
    ReservedKey(String),
    #[error("not permitted")]
    NotPermitted,
    #[error("signature check failed")]
    BadSignature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Passed,
    Failed,
    Proposed,
}

/// Side effects a verdict asks the messaging layer to carry out. Only the
/// committer of the triggering commit acts on them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    RemoveMember { user: String },
    InviteMember { user: String },
    ProposalResolved { proposal_id: String, verdict: Verdict },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluation {
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub effects: Vec<Effect>,
}

impl Evaluation {
    pub fn passed(effects: Vec<Effect>) -> Self {
        Self { verdict: Verdict::Passed, reason: None, effects }
    }

    pub fn proposed() -> Self {
        Self { verdict: Verdict::Proposed, reason: None, effects: Vec::new() }
    }

    pub fn failed(err: &GovError) -> Self {
        use alloc::string::ToString;
        Self { verdict: Verdict::Failed, reason: Some(err.to_string()), effects: Vec::new() }
    }
}

/// What an evaluation may consult besides the two states.
pub struct EvalContext<'a> {
    /// Epoch at which the action takes effect.
    pub epoch: u64,
    pub group_id: &'a str,
    pub roster: &'a [String],
    pub directory: &'a dyn Directory,
}

impl EvalContext<'_> {
    pub fn in_roster(&self, user: &str) -> bool {
        self.roster.iter().any(|u| u == user)
    }
}
