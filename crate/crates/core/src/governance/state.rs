use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canonical;
use crate::crypto::Digest32;
use crate::policy::vote::VotePolicyConfig;

use super::action::payload::Choice;
use super::action::{ActionMessage, ActionType};
use super::report::Report;

pub const ADMIN: &str = "admin";
pub const MEMBER: &str = "member";

pub const KEY_NAME: &str = "name";
pub const KEY_TOPIC: &str = "topic";
pub const KEY_COMMUNITY: &str = "community_id";
pub const KEY_GUIDELINES: &str = "guidelines";
pub const KEY_WORD_FILTER: &str = "word_filter";
pub const KEY_VOTE_POLICY: &str = "vote_policy";

pub fn member_permissions() -> BTreeSet<ActionType> {
    use ActionType::*;
    [SendText, React, Report, PollStart, PollVote, Escalate].into_iter().collect()
}

/// Replicated governance store. Every honest member holds a byte-identical
/// copy at the same epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernanceState {
    pub kv: BTreeMap<String, Value>,
    pub roles: BTreeMap<String, BTreeSet<ActionType>>,
    pub user_roles: BTreeMap<String, BTreeSet<String>>,
    pub pending: BTreeMap<String, PendingProposal>,
    /// Users whose invitation passed but whose Add has not merged yet.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub invited: BTreeSet<String>,
    pub version_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingProposal {
    pub proposal_id: String,
    pub proposer: String,
    pub target: ActionMessage,
    pub policy: String,
    /// Roster when the proposal was created; only these users may vote.
    pub snapshot: BTreeSet<String>,
    pub votes: BTreeMap<String, Choice>,
    pub created_at_epoch: u64,
}

impl GovernanceState {
    pub fn new(creator: &str, group_id: &str, community_id: &str) -> Self {
        let mut kv = BTreeMap::new();
        kv.insert(KEY_NAME.into(), Value::String(group_id.into()));
        kv.insert(KEY_TOPIC.into(), Value::String(String::new()));
        kv.insert(KEY_COMMUNITY.into(), Value::String(community_id.into()));
        kv.insert(KEY_GUIDELINES.into(), Value::String(String::new()));
        kv.insert(KEY_WORD_FILTER.into(), json!([]));
        kv.insert(
            KEY_VOTE_POLICY.into(),
            serde_json::to_value(VotePolicyConfig::default()).expect("plain struct"),
        );
        let mut roles = BTreeMap::new();
        roles.insert(ADMIN.to_string(), ActionType::all());
        roles.insert(MEMBER.to_string(), member_permissions());
        let mut user_roles = BTreeMap::new();
        user_roles.insert(creator.to_string(), [ADMIN.to_string(), MEMBER.to_string()].into());
        Self { kv, roles, user_roles, pending: BTreeMap::new(), invited: BTreeSet::new(), version_epoch: 0 }
    }

    fn kv_str(&self, key: &str) -> &str {
        self.kv.get(key).and_then(Value::as_str).unwrap_or("")
    }

    pub fn name(&self) -> &str {
        self.kv_str(KEY_NAME)
    }

    pub fn topic(&self) -> &str {
        self.kv_str(KEY_TOPIC)
    }

    pub fn community_id(&self) -> &str {
        self.kv_str(KEY_COMMUNITY)
    }

    pub fn word_filter(&self) -> Vec<String> {
        self.kv
            .get(KEY_WORD_FILTER)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default()
    }

    pub fn vote_config(&self) -> VotePolicyConfig {
        self.kv
            .get(KEY_VOTE_POLICY)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default()
    }

    pub fn permissions(&self, user: &str) -> BTreeSet<ActionType> {
        let Some(roles) = self.user_roles.get(user) else {
            return BTreeSet::new();
        };
        roles.iter().filter_map(|r| self.roles.get(r)).flatten().copied().collect()
    }

    /// Users holding a role that grants `action`.
    pub fn holders_of(&self, action: ActionType) -> Vec<String> {
        self.user_roles
            .keys()
            .filter(|u| self.permissions(u).contains(&action))
            .cloned()
            .collect()
    }

    pub fn to_canonical(&self) -> Vec<u8> {
        canonical::to_vec(self)
    }
}

pub fn init_governance_state(creator: &str, group_id: &str, community_id: &str) -> GovernanceState {
    GovernanceState::new(creator, group_id, community_id)
}

pub fn state_hash(gov: &GovernanceState) -> Digest32 {
    canonical::hash(gov)
}

pub fn rbac_check(user: &str, action: ActionType, gov: &GovernanceState) -> bool {
    gov.permissions(user).contains(&action)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMessage {
    pub id: String,
    pub sender: String,
    pub epoch: u64,
    /// Full signed action, kept so it can be reported later.
    pub action: ActionMessage,
    /// Matched the word filter: retained but not displayed.
    pub hidden: bool,
}

impl StoredMessage {
    pub fn text(&self) -> &str {
        self.action.payload.get("text").and_then(Value::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reaction {
    pub message_id: String,
    pub user: String,
    pub emoji: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceivedReport {
    pub from: String,
    pub report: Report,
    pub verified: bool,
}

/// Per-client content history. May diverge between members without
/// affecting governance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentState {
    pub messages: Vec<StoredMessage>,
    pub reactions: Vec<Reaction>,
    pub removed: BTreeSet<String>,
    /// Ballots observed over unordered delivery, by proposal then voter.
    pub ballots: BTreeMap<String, BTreeMap<String, ActionMessage>>,
    pub reports: Vec<ReceivedReport>,
    pub notices: Vec<String>,
}

impl ContentState {
    pub fn message(&self, id: &str) -> Option<&StoredMessage> {
        self.messages.iter().find(|m| m.id == id)
    }

    /// Messages a user interface should render.
    pub fn visible(&self) -> impl Iterator<Item = &StoredMessage> {
        self.messages.iter().filter(|m| !m.hidden && !self.removed.contains(&m.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_state_roles() {
        let g = init_governance_state("alice", "g", "c");
        assert_eq!(g.user_roles["alice"], BTreeSet::from([ADMIN.into(), MEMBER.into()]));
        assert_eq!(g.name(), "g");
        assert!(g.word_filter().is_empty());
        assert!(rbac_check("alice", ActionType::KickUser, &g));
        assert!(!g.roles[MEMBER].contains(&ActionType::KickUser));
        assert!(!rbac_check("bob", ActionType::SendText, &g));
        assert_eq!(state_hash(&g), state_hash(&init_governance_state("alice", "g", "c")));
    }

    #[test]
    fn hash_survives_roundtrip_and_tracks_kv() {
        let g = init_governance_state("alice", "g", "c");
        let back: GovernanceState = canonical::from_slice(&g.to_canonical()).unwrap();
        assert_eq!(state_hash(&back), state_hash(&g));
        let mut h = g.clone();
        h.kv.insert(KEY_TOPIC.into(), "books".into());
        assert_ne!(state_hash(&h), state_hash(&g));
    }
}
