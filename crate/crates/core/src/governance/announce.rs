//! Bringing a joiner's governance state in line with the group's.

use serde_json::Value;

use crate::crypto::Digest32;

use super::action::payload::{Accept, Announcement};
use super::action::{ActionMessage, ActionType};
use super::state::{state_hash, GovernanceState};
use super::GovError;

pub fn announcement_payload(gov: &GovernanceState, epoch: u64) -> Value {
    serde_json::to_value(Announcement { state: gov.clone(), at_epoch: epoch }).expect("plain struct")
}

/// Validates an announcement for a join at `join_epoch` and returns the
/// state to install.
pub fn accept_group(announcement: &ActionMessage, join_epoch: u64) -> Result<GovernanceState, GovError> {
    if announcement.action_type != ActionType::GovStateAnnouncement {
        return Err(GovError::BadPayload(announcement.action_type));
    }
    let a: Announcement = announcement.parse()?;
    if a.at_epoch != join_epoch {
        return Err(GovError::EpochMismatch { expected: join_epoch, got: a.at_epoch });
    }
    Ok(a.state)
}

pub fn accept_payload(gov: &GovernanceState) -> Value {
    serde_json::to_value(Accept { gov_hash: state_hash(gov) }).expect("plain struct")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcceptCheck {
    Ok,
    Mismatch,
}

pub fn check_accept(accept: &ActionMessage, expected: &Digest32) -> AcceptCheck {
    match accept.parse::<Accept>() {
        Ok(a) if a.gov_hash == *expected => AcceptCheck::Ok,
        _ => AcceptCheck::Mismatch,
    }
}
