//! Policy template and the built-in policies.
//!
//! A policy is consulted only for actions the role check did not already
//! permit. The first registered policy whose `filter` accepts governs the
//! action: `init` prepares state, `check` yields a verdict, and `pass` or
//! `fail` carry out the consequence.

pub mod vote;
pub mod word_filter;

use alloc::vec::Vec;

use crate::governance::{
    ActionMessage, ContentState, Effect, EvalContext, Evaluation, GovError, GovernanceState, Verdict,
};

pub trait Policy: Sync {
    fn name(&self) -> &'static str;
    fn filter(&self, action: &ActionMessage, gov: &GovernanceState) -> bool;
    fn init(&self, action: &ActionMessage, gov: &mut GovernanceState, ctx: &EvalContext) -> Result<(), GovError>;
    fn check(&self, action: &ActionMessage, gov: &GovernanceState, ctx: &EvalContext) -> Verdict;
    fn pass(
        &self,
        action: &ActionMessage,
        gov: &mut GovernanceState,
        con: &mut ContentState,
        ctx: &EvalContext,
    ) -> Result<Vec<Effect>, GovError>;
    fn fail(
        &self,
        action: &ActionMessage,
        gov: &mut GovernanceState,
        con: &mut ContentState,
        ctx: &EvalContext,
    ) -> Vec<Effect>;
}

pub static VOTE: vote::VotePolicy = vote::VotePolicy;
pub static WORD_FILTER: word_filter::WordFilterPolicy = word_filter::WordFilterPolicy;

/// Built-in registration order.
pub fn builtin() -> Vec<&'static dyn Policy> {
    alloc::vec![&VOTE, &WORD_FILTER]
}

/// Drives one policy through its hooks.
pub fn run(
    policy: &dyn Policy,
    action: &ActionMessage,
    gov: &mut GovernanceState,
    con: &mut ContentState,
    ctx: &EvalContext,
) -> Result<Evaluation, GovError> {
    policy.init(action, gov, ctx)?;
    Ok(match policy.check(action, gov, ctx) {
        Verdict::Passed => Evaluation::passed(policy.pass(action, gov, con, ctx)?),
        Verdict::Failed => {
            let effects = policy.fail(action, gov, con, ctx);
            Evaluation {
                verdict: Verdict::Failed,
                reason: Some(alloc::format!("rejected by {}", policy.name())),
                effects,
            }
        }
        Verdict::Proposed => Evaluation::proposed(),
    })
}
