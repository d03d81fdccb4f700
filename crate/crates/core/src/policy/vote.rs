//! Majority voting over governance actions.
//!
//! Ballots travel as unordered messages and are folded into the replicated
//! state only through `PollEnd` batches, which every client re-verifies.
//! Batches are additive: each one contributes its valid, not yet counted
//! ballots to the proposal, and the proposal resolves once the counted
//! ballots decide it.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::directory::Directory;
use crate::governance::action::payload::{self, Choice};
use crate::governance::action::ActionType;
use crate::governance::{
    apply_action, ActionMessage, ContentState, Effect, EvalContext, Evaluation, GovError, GovernanceState,
    PendingProposal, Verdict,
};

use super::Policy;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VotePolicyConfig {
    pub quorum_num: u32,
    pub quorum_den: u32,
    /// Actions that become proposals when the sender lacks the permission.
    pub governed_types: BTreeSet<ActionType>,
}

impl Default for VotePolicyConfig {
    fn default() -> Self {
        Self { quorum_num: 1, quorum_den: 2, governed_types: [ActionType::ChangeName].into() }
    }
}

impl VotePolicyConfig {
    pub fn is_valid(&self) -> bool {
        self.quorum_num > 0 && self.quorum_num <= self.quorum_den
    }

    /// Yes-votes needed: the smallest count strictly above the quorum
    /// fraction, capped at the electorate size.
    pub fn threshold(&self, n: usize) -> usize {
        let above = (self.quorum_num as usize * n) / self.quorum_den.max(1) as usize + 1;
        above.min(n)
    }
}

pub fn decide(yes: usize, no: usize, n: usize, threshold: usize) -> Verdict {
    if yes >= threshold {
        Verdict::Passed
    } else if no > n - threshold {
        Verdict::Failed
    } else {
        Verdict::Proposed
    }
}

pub fn tally(pending: &PendingProposal, cfg: &VotePolicyConfig) -> Verdict {
    let yes = pending.votes.values().filter(|c| **c == Choice::Yes).count();
    let no = pending.votes.len() - yes;
    let n = pending.snapshot.len();
    decide(yes, no, n, cfg.threshold(n))
}

/// A target may be anything committed in order except poll machinery.
fn valid_target(target: &ActionMessage, proposer: &str, ctx: &EvalContext) -> Result<(), GovError> {
    let t = target.action_type;
    if t.is_unordered() || matches!(t, ActionType::PollStart | ActionType::PollEnd) {
        return Err(GovError::BadPayload(ActionType::PollStart));
    }
    if target.header.sender != proposer || target.header.group_id != ctx.group_id {
        return Err(GovError::BadPayload(ActionType::PollStart));
    }
    let pk = ctx.directory.gov_pk(proposer).ok_or(GovError::BadSignature)?;
    if !target.verify(&pk) {
        return Err(GovError::BadSignature);
    }
    Ok(())
}

fn open_proposal(
    proposal_id: &str,
    proposer: &str,
    target: ActionMessage,
    gov: &mut GovernanceState,
    ctx: &EvalContext,
) -> Result<(), GovError> {
    if gov.pending.contains_key(proposal_id) {
        return Err(GovError::DuplicateProposal(proposal_id.into()));
    }
    gov.pending.insert(
        proposal_id.into(),
        PendingProposal {
            proposal_id: proposal_id.into(),
            proposer: proposer.into(),
            target,
            policy: "vote".into(),
            snapshot: ctx.roster.iter().cloned().collect(),
            votes: BTreeMap::new(),
            created_at_epoch: ctx.epoch,
        },
    );
    Ok(())
}

/// Opens a poll from an explicit `PollStart`.
pub fn start_poll(action: &ActionMessage, gov: &mut GovernanceState, ctx: &EvalContext) -> Result<Evaluation, GovError> {
    let p: payload::PollStart = action.parse()?;
    valid_target(&p.target, action.sender(), ctx)?;
    open_proposal(action.id(), action.sender(), p.target, gov, ctx)?;
    Ok(Evaluation::proposed())
}

/// The voter and choice of a ballot, if it is a properly signed vote by a
/// snapshot member on this proposal.
pub fn validate_ballot(
    ballot: &ActionMessage,
    pending: &PendingProposal,
    group_id: &str,
    directory: &dyn Directory,
) -> Option<(String, Choice)> {
    if ballot.action_type != ActionType::PollVote || ballot.header.group_id != group_id {
        return None;
    }
    let v: payload::PollVote = ballot.parse().ok()?;
    let voter = ballot.sender();
    if v.proposal_id != pending.proposal_id || !pending.snapshot.contains(voter) {
        return None;
    }
    let pk = directory.gov_pk(voter)?;
    ballot.verify(&pk).then(|| (voter.into(), v.choice))
}

/// Records an unordered ballot locally. Returns whether it was new.
pub fn cast(action: &ActionMessage, gov: &GovernanceState, con: &mut ContentState) -> Result<bool, GovError> {
    let v: payload::PollVote = action.parse()?;
    if let Some(p) = gov.pending.get(&v.proposal_id) {
        if !p.snapshot.contains(action.sender()) || p.votes.contains_key(action.sender()) {
            return Ok(false);
        }
    }
    let slot = con.ballots.entry(v.proposal_id).or_default();
    if slot.contains_key(action.sender()) {
        return Ok(false);
    }
    slot.insert(action.sender().into(), action.clone());
    Ok(true)
}

/// Observed ballots not yet counted, if adding them decides the proposal.
pub fn ready_batch(
    proposal_id: &str,
    gov: &GovernanceState,
    con: &ContentState,
    group_id: &str,
    directory: &dyn Directory,
) -> Option<Vec<ActionMessage>> {
    let pending = gov.pending.get(proposal_id)?;
    let mut trial = pending.clone();
    let mut fresh = Vec::new();
    for ballot in con.ballots.get(proposal_id)?.values() {
        if let Some((voter, choice)) = validate_ballot(ballot, pending, group_id, directory) {
            if !trial.votes.contains_key(&voter) {
                trial.votes.insert(voter, choice);
                fresh.push(ballot.clone());
            }
        }
    }
    (!fresh.is_empty() && tally(&trial, &gov.vote_config()) != Verdict::Proposed).then_some(fresh)
}

fn proposal_id_of(action: &ActionMessage) -> Result<String, GovError> {
    match action.action_type {
        ActionType::PollEnd => Ok(action.parse::<payload::PollEnd>()?.proposal_id),
        _ => Ok(action.id().into()),
    }
}

pub struct VotePolicy;

impl Policy for VotePolicy {
    fn name(&self) -> &'static str {
        "vote"
    }

    fn filter(&self, action: &ActionMessage, gov: &GovernanceState) -> bool {
        matches!(action.action_type, ActionType::PollStart | ActionType::PollVote | ActionType::PollEnd)
            || gov.vote_config().governed_types.contains(&action.action_type)
    }

    fn init(&self, action: &ActionMessage, gov: &mut GovernanceState, ctx: &EvalContext) -> Result<(), GovError> {
        match action.action_type {
            // Reaching the policy means the sender lacks these permissions.
            ActionType::PollStart | ActionType::PollVote => Err(GovError::NotPermitted),
            ActionType::PollEnd => {
                let batch: payload::PollEnd = action.parse()?;
                let pending = gov
                    .pending
                    .get_mut(&batch.proposal_id)
                    .ok_or_else(|| GovError::UnknownTarget(batch.proposal_id.clone()))?;
                for ballot in &batch.ballots {
                    if let Some((voter, choice)) = validate_ballot(ballot, pending, ctx.group_id, ctx.directory) {
                        pending.votes.entry(voter).or_insert(choice);
                    }
                }
                Ok(())
            }
            _ => open_proposal(action.id(), action.sender(), action.clone(), gov, ctx),
        }
    }

    fn check(&self, action: &ActionMessage, gov: &GovernanceState, _ctx: &EvalContext) -> Verdict {
        let Ok(pid) = proposal_id_of(action) else {
            return Verdict::Failed;
        };
        match gov.pending.get(&pid) {
            Some(p) => tally(p, &gov.vote_config()),
            None => Verdict::Failed,
        }
    }

    fn pass(
        &self,
        action: &ActionMessage,
        gov: &mut GovernanceState,
        con: &mut ContentState,
        ctx: &EvalContext,
    ) -> Result<Vec<Effect>, GovError> {
        let pid = proposal_id_of(action)?;
        let pending = gov.pending.remove(&pid).ok_or_else(|| GovError::UnknownTarget(pid.clone()))?;
        let mut trial = gov.clone();
        let mut effects = match apply_action(&pending.target, &mut trial, con, ctx) {
            Ok(ev) if ev.verdict == Verdict::Passed => {
                *gov = trial;
                con.notices.push(format!("proposal {pid} passed"));
                ev.effects
            }
            Ok(_) | Err(_) => {
                con.notices.push(format!("proposal {pid} passed but could not be applied"));
                Vec::new()
            }
        };
        effects.push(Effect::ProposalResolved { proposal_id: pid, verdict: Verdict::Passed });
        Ok(effects)
    }

    fn fail(
        &self,
        action: &ActionMessage,
        gov: &mut GovernanceState,
        con: &mut ContentState,
        _ctx: &EvalContext,
    ) -> Vec<Effect> {
        let Ok(pid) = proposal_id_of(action) else {
            return Vec::new();
        };
        if gov.pending.remove(&pid).is_none() {
            return Vec::new();
        }
        con.notices.push(format!("proposal {pid} failed"));
        alloc::vec![Effect::ProposalResolved { proposal_id: pid, verdict: Verdict::Failed }]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_strict_majority() {
        let cfg = VotePolicyConfig::default();
        assert_eq!(cfg.threshold(5), 3);
        assert_eq!(cfg.threshold(2), 2);
        // Independent oracle: ceil((n+1)/2).
        for n in 1..=10usize {
            assert_eq!(cfg.threshold(n), (n + 2) / 2, "n={n}");
        }
    }

    #[test]
    fn unanimity_quorum_caps_at_n() {
        let cfg = VotePolicyConfig { quorum_num: 1, quorum_den: 1, ..Default::default() };
        assert_eq!(cfg.threshold(4), 4);
    }

    #[test]
    fn decide_regions() {
        assert_eq!(decide(3, 0, 5, 3), Verdict::Passed);
        assert_eq!(decide(0, 5, 5, 3), Verdict::Failed);
        assert_eq!(decide(2, 2, 5, 3), Verdict::Proposed);
        // Even n: a 2-2 split can no longer reach 3.
        assert_eq!(decide(2, 2, 4, 3), Verdict::Failed);
    }
}
