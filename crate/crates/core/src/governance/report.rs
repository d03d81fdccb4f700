//! Abuse reports carrying the reported user's own signed messages.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::directory::Directory;

use super::action::ActionMessage;
use super::state::ContentState;
use super::GovError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub reporter: String,
    pub reported: String,
    pub msgs: Vec<ActionMessage>,
    pub reason: String,
}

/// Collects the stored signed messages for `ids`. They must all come from
/// the same sender.
pub fn build_report(con: &ContentState, reporter: &str, ids: &[String], reason: &str) -> Result<Report, GovError> {
    let msgs = ids
        .iter()
        .map(|id| con.message(id).map(|m| m.action.clone()).ok_or_else(|| GovError::UnknownMessageId(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let reported = msgs.first().ok_or(GovError::EmptyReport)?.header.sender.clone();
    if msgs.iter().any(|m| m.header.sender != reported) {
        return Err(GovError::MixedSenders);
    }
    Ok(Report { reporter: reporter.into(), reported, msgs, reason: reason.into() })
}

/// True iff every embedded message names the reported user as sender and
/// verifies under that user's registered governance key.
pub fn verify_report(report: &Report, directory: &dyn Directory) -> bool {
    let Some(pk) = directory.gov_pk(&report.reported) else {
        return false;
    };
    !report.msgs.is_empty()
        && report.msgs.iter().all(|m| m.header.sender == report.reported && m.verify(&pk))
}
