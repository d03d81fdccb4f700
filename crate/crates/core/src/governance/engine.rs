use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::policy::vote::{self, VotePolicyConfig};
use crate::policy::{self, word_filter, Policy};

use super::action::payload;
use super::report::{self, verify_report};
use super::state::{
    rbac_check, ReceivedReport, Reaction, StoredMessage, KEY_COMMUNITY, KEY_NAME, KEY_TOPIC, KEY_VOTE_POLICY,
    KEY_WORD_FILTER, MEMBER,
};
use super::{
    ActionMessage, ActionType, ContentState, Effect, EvalContext, Evaluation, GovError, GovernanceState,
};

/// Runs an already signature-checked action through the role check and,
/// failing that, the first policy whose filter accepts it.
///
/// The governance state is only replaced when evaluation succeeds;
/// `version_epoch` moves whenever it changes.
pub fn evaluate(
    action: &ActionMessage,
    gov: &mut GovernanceState,
    con: &mut ContentState,
    ctx: &EvalContext,
    policies: &[&dyn Policy],
) -> Evaluation {
    let mut next = gov.clone();
    let result = if rbac_check(action.sender(), action.action_type, gov) {
        apply_action(action, &mut next, con, ctx)
    } else if let Some(p) = policies.iter().find(|p| p.filter(action, gov)) {
        policy::run(*p, action, &mut next, con, ctx)
    } else {
        Err(GovError::NotPermitted)
    };
    match result {
        Ok(ev) => {
            if next != *gov {
                next.version_epoch = ctx.epoch;
                *gov = next;
            }
            ev
        }
        Err(e) => Evaluation::failed(&e),
    }
}

fn set_str(gov: &mut GovernanceState, key: &str, value: String) {
    gov.kv.insert(key.into(), serde_json::Value::String(value));
}

/// Effect of an action that has been permitted. Content-state changes are
/// made only after validation, so an error leaves `con` untouched.
pub fn apply_action(
    action: &ActionMessage,
    gov: &mut GovernanceState,
    con: &mut ContentState,
    ctx: &EvalContext,
) -> Result<Evaluation, GovError> {
    use ActionType::*;
    let mut effects = Vec::new();
    match action.action_type {
        SendText => {
            let p: payload::Text = action.parse()?;
            if con.message(action.id()).is_none() {
                con.messages.push(StoredMessage {
                    id: action.id().into(),
                    sender: action.sender().into(),
                    epoch: ctx.epoch,
                    action: action.clone(),
                    hidden: word_filter::enforce(gov, &p.text),
                });
            }
        }
        React => {
            let p: payload::React = action.parse()?;
            if con.message(&p.message_id).is_none() {
                return Err(GovError::UnknownTarget(p.message_id));
            }
            con.reactions.push(Reaction { message_id: p.message_id, user: action.sender().into(), emoji: p.emoji });
        }
        RemoveMsg => {
            let p: payload::MessageRef = action.parse()?;
            if con.message(&p.message_id).is_none() {
                return Err(GovError::UnknownTarget(p.message_id));
            }
            con.removed.insert(p.message_id);
        }
        Report | Escalate => {
            let report: report::Report = action.parse()?;
            let verified = report.reporter == action.sender() && verify_report(&report, ctx.directory);
            con.reports.push(ReceivedReport { from: action.sender().into(), report, verified });
        }
        SetState => {
            let p: payload::SetState = action.parse()?;
            match p.key.as_str() {
                KEY_COMMUNITY | KEY_WORD_FILTER => return Err(GovError::ReservedKey(p.key)),
                KEY_VOTE_POLICY => {
                    let cfg: VotePolicyConfig =
                        serde_json::from_value(p.value.clone()).map_err(|_| GovError::BadPayload(SetState))?;
                    if !cfg.is_valid() {
                        return Err(GovError::BadPayload(SetState));
                    }
                }
                _ => {}
            }
            gov.kv.insert(p.key, p.value);
        }
        ChangeName => set_str(gov, KEY_NAME, action.parse::<payload::Name>()?.name),
        ChangeTopic => set_str(gov, KEY_TOPIC, action.parse::<payload::Topic>()?.topic),
        DefRole => {
            let p: payload::DefRole = action.parse()?;
            gov.roles.insert(p.role, p.permissions);
        }
        SetUserRole => {
            let p: payload::SetUserRole = action.parse()?;
            if !ctx.in_roster(&p.user) {
                return Err(GovError::UnknownTarget(p.user));
            }
            if let Some(r) = p.roles.iter().find(|r| !gov.roles.contains_key(*r)) {
                return Err(GovError::UnknownTarget(r.clone()));
            }
            gov.user_roles.insert(p.user, p.roles);
        }
        KickUser => {
            let p: payload::User = action.parse()?;
            if !ctx.in_roster(&p.user) {
                return Err(GovError::UnknownTarget(p.user));
            }
            gov.user_roles.remove(&p.user);
            effects.push(Effect::RemoveMember { user: p.user });
        }
        InviteUser => {
            let p: payload::User = action.parse()?;
            if ctx.in_roster(&p.user) {
                return Err(GovError::AlreadyMember(p.user));
            }
            gov.invited.insert(p.user.clone());
            effects.push(Effect::InviteMember { user: p.user });
        }
        SetTextFilter => {
            let p: payload::Words = action.parse()?;
            word_filter::install(gov, p.words);
        }
        PollStart => return vote::start_poll(action, gov, ctx),
        PollVote => {
            vote::cast(action, gov, con)?;
        }
        PollEnd => return policy::run(&policy::VOTE, action, gov, con, ctx),
        // Handled by the join protocol, never replicated.
        GovStateAnnouncement | Accept => {}
    }
    Ok(Evaluation::passed(effects))
}

/// A member joined through a merged Add. Returns false when no invitation
/// authorized it; such a member gets no roles.
pub fn on_member_added(gov: &mut GovernanceState, user: &str, epoch: u64) -> bool {
    let authorized = gov.invited.remove(user);
    if authorized {
        gov.user_roles.insert(user.into(), BTreeSet::from([MEMBER.to_string()]));
    }
    gov.version_epoch = epoch;
    authorized
}

/// A member left through a merged Remove. Returns false when the member
/// still held roles, i.e. no kick preceded the removal.
pub fn on_member_removed(gov: &mut GovernanceState, user: &str, epoch: u64) -> bool {
    let authorized = !gov.user_roles.contains_key(user);
    gov.user_roles.remove(user);
    gov.invited.remove(user);
    gov.version_epoch = epoch;
    authorized
}
