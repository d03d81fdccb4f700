//! Moderator-specified word filter. Matching is a case-insensitive
//! substring test on NFC-normalized text.

use alloc::string::String;
use alloc::vec::Vec;

use unicode_normalization::UnicodeNormalization;

use crate::governance::action::ActionType;
use crate::governance::state::KEY_WORD_FILTER;
use crate::governance::{ActionMessage, ContentState, Effect, EvalContext, GovError, GovernanceState, Verdict};

use super::Policy;

fn normalize(s: &str) -> String {
    s.nfc().collect::<String>().to_lowercase().nfc().collect()
}

pub fn matches(words: &[String], text: &str) -> bool {
    let text = normalize(text);
    words.iter().map(|w| normalize(w)).any(|w| !w.is_empty() && text.contains(&w))
}

pub fn install(gov: &mut GovernanceState, words: Vec<String>) {
    gov.kv.insert(KEY_WORD_FILTER.into(), serde_json::to_value(words).expect("strings"));
}

/// Whether `text` must be hidden under the group's current filter.
pub fn enforce(gov: &GovernanceState, text: &str) -> bool {
    matches(&gov.word_filter(), text)
}

/// Installing a filter requires the permission (or a passing vote); for
/// anyone else this policy simply declines.
pub struct WordFilterPolicy;

impl Policy for WordFilterPolicy {
    fn name(&self) -> &'static str {
        "word_filter"
    }

    fn filter(&self, action: &ActionMessage, _gov: &GovernanceState) -> bool {
        action.action_type == ActionType::SetTextFilter
    }

    fn init(&self, _: &ActionMessage, _: &mut GovernanceState, _: &EvalContext) -> Result<(), GovError> {
        Ok(())
    }

    fn check(&self, _: &ActionMessage, _: &GovernanceState, _: &EvalContext) -> Verdict {
        Verdict::Failed
    }

    fn pass(
        &self,
        _: &ActionMessage,
        _: &mut GovernanceState,
        _: &mut ContentState,
        _: &EvalContext,
    ) -> Result<Vec<Effect>, GovError> {
        Ok(Vec::new())
    }

    fn fail(&self, _: &ActionMessage, _: &mut GovernanceState, _: &mut ContentState, _: &EvalContext) -> Vec<Effect> {
        Vec::new()
    }
}
