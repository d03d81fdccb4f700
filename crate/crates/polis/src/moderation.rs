//! The moderation service's case docket. The service itself is an ordinary
//! client node named `@moderation`; this module only holds its cases.

use std::collections::BTreeMap;

use polis_core::directory::Directory;
use polis_core::governance::{verify_report, ActionMessage, ActionType, Report};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    None,
    Ban { days: u64 },
    Revoke,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: String,
    pub group_id: String,
    pub report: Report,
    pub verified: bool,
    pub received_at: u64,
    #[serde(default)]
    pub decision: Option<Decision>,
    #[serde(default)]
    pub decided_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DocketError {
    #[error("escalation payload is not a report: {0}")]
    ParseError(String),
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("case {0:?} failed verification")]
    UnverifiedCase(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Docket {
    cases: BTreeMap<String, Case>,
}

impl Docket {
    /// Opens a case for an escalation. The reporter must be the sender and
    /// every reported message must verify under the reported user's key.
    pub fn receive_escalation(
        &mut self,
        action: &ActionMessage,
        dir: &dyn Directory,
        now: u64,
    ) -> Result<&Case, DocketError> {
        if action.action_type != ActionType::Escalate {
            return Err(DocketError::ParseError(format!("{} is not an escalation", action.action_type)));
        }
        let report: Report = action.parse().map_err(|e| DocketError::ParseError(e.to_string()))?;
        let verified = report.reporter == action.sender() && verify_report(&report, dir);
        let case = Case {
            case_id: action.id().to_string(),
            group_id: action.header.group_id.clone(),
            report,
            verified,
            received_at: now,
            decision: None,
            decided_at: None,
        };
        Ok(self.cases.entry(case.case_id.clone()).or_insert(case))
    }

    pub fn get(&self, case_id: &str) -> Option<&Case> {
        self.cases.get(case_id)
    }

    pub fn list(&self, verified: Option<bool>) -> Vec<&Case> {
        self.cases.values().filter(|c| verified.is_none_or(|v| c.verified == v)).collect()
    }

    /// Records a decision; the latest one wins.
    pub fn decide(&mut self, case_id: &str, decision: Decision, now: u64) -> Result<&Case, DocketError> {
        let case = self.cases.get_mut(case_id).ok_or_else(|| DocketError::UnknownCase(case_id.into()))?;
        if !case.verified {
            return Err(DocketError::UnverifiedCase(case_id.into()));
        }
        case.decision = Some(decision);
        case.decided_at = Some(now);
        Ok(case)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use polis_core::crypto::SigKeyPair;
    use polis_core::directory::DirectoryEntry;
    use polis_core::governance::{build_report, ActionHeader, ContentState, StoredMessage};
    use rand_chacha::rand_core::SeedableRng;
    use serde_json::json;

    struct Fx {
        keys: BTreeMap<String, SigKeyPair>,
        dir: BTreeMap<String, DirectoryEntry>,
    }

    impl Fx {
        fn new() -> Self {
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(8);
            let mut keys = BTreeMap::new();
            let mut dir = BTreeMap::new();
            for n in ["bob", "carol"] {
                let k = SigKeyPair::generate(&mut rng);
                dir.insert(n.into(), DirectoryEntry { username: n.into(), sig_pk: k.public, gov_pk: k.public, registered_at: 0, revoked: false });
                keys.insert(n.to_string(), k);
            }
            Self { keys, dir }
        }

        fn act(&self, who: &str, id: &str, t: ActionType, payload: serde_json::Value) -> ActionMessage {
            let header = ActionHeader { sender: who.into(), action_id: id.into(), group_id: "ms:bob".into(), community_id: "c".into() };
            ActionMessage::new(header, t, payload, &self.keys[who])
        }

        fn report(&self) -> Report {
            let msg = self.act("carol", "m1", ActionType::SendText, json!({ "text": "abuse" }));
            let mut con = ContentState::default();
            con.messages.push(StoredMessage { id: "m1".into(), sender: "carol".into(), epoch: 1, action: msg, hidden: false });
            build_report(&con, "bob", &["m1".into()], "rude").unwrap()
        }
    }

    #[test]
    fn honest_escalation_verifies() {
        let fx = Fx::new();
        let mut d = Docket::default();
        let esc = fx.act("bob", "e1", ActionType::Escalate, serde_json::to_value(fx.report()).unwrap());
        assert!(d.receive_escalation(&esc, &fx.dir, 5).unwrap().verified);
        assert_eq!(d.list(None).len(), 1);
    }

    #[test]
    fn forged_inner_signature_is_unverified_and_undecidable() {
        let fx = Fx::new();
        let mut d = Docket::default();
        let mut report = fx.report();
        report.msgs[0].payload = json!({ "text": "something else" });
        let esc = fx.act("bob", "e1", ActionType::Escalate, serde_json::to_value(report).unwrap());
        assert!(!d.receive_escalation(&esc, &fx.dir, 5).unwrap().verified);
        assert_eq!(d.decide("e1", Decision::Ban { days: 7 }, 6), Err(DocketError::UnverifiedCase("e1".into())));
        assert!(d.list(Some(true)).is_empty());
        assert_eq!(d.list(Some(false)).len(), 1);
    }

    #[test]
    fn reporter_must_be_sender() {
        let fx = Fx::new();
        let mut d = Docket::default();
        let esc = fx.act("carol", "e1", ActionType::Escalate, serde_json::to_value(fx.report()).unwrap());
        assert!(!d.receive_escalation(&esc, &fx.dir, 5).unwrap().verified);
    }

    #[test]
    fn malformed_payload_is_a_parse_error() {
        let fx = Fx::new();
        let mut d = Docket::default();
        let esc = fx.act("bob", "e1", ActionType::Escalate, json!({ "nope": 1 }));
        assert!(matches!(d.receive_escalation(&esc, &fx.dir, 5), Err(DocketError::ParseError(_))));
        assert!(d.list(None).is_empty());
    }

    #[test]
    fn decisions_last_wins() {
        let fx = Fx::new();
        let mut d = Docket::default();
        assert!(d.list(None).is_empty());
        let esc = fx.act("bob", "e1", ActionType::Escalate, serde_json::to_value(fx.report()).unwrap());
        d.receive_escalation(&esc, &fx.dir, 5).unwrap();
        let esc2 = fx.act("bob", "e2", ActionType::Escalate, serde_json::to_value(fx.report()).unwrap());
        d.receive_escalation(&esc2, &fx.dir, 5).unwrap();
        assert_eq!(d.list(None).len(), 2);
        d.decide("e1", Decision::Ban { days: 7 }, 6).unwrap();
        d.decide("e1", Decision::Revoke, 7).unwrap();
        let c = d.get("e1").unwrap();
        assert_eq!(c.decision, Some(Decision::Revoke));
        assert_eq!(c.decided_at, Some(7));
        assert_eq!(d.decide("zz", Decision::None, 8), Err(DocketError::UnknownCase("zz".into())));
    }
}
