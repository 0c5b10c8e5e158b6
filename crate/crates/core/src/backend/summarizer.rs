use std::sync::atomic::{AtomicU64, Ordering};

use super::{BackendError, Summarizer};
use crate::normalize::{apply_rules, RuleSet, VerdictValue};

/// Offline stand-in for a summarizer service: the first standalone yes/no
/// word wins, otherwise the lexical rules are tried against the question's
/// target.
pub struct LexicalSummarizer {
    rules: RuleSet,
    non_verdicts: AtomicU64,
}

impl Default for LexicalSummarizer {
    fn default() -> Self {
        LexicalSummarizer {
            rules: RuleSet::builtin(),
            non_verdicts: AtomicU64::new(0),
        }
    }
}

impl LexicalSummarizer {
    pub fn non_verdict_count(&self) -> u64 {
        self.non_verdicts.load(Ordering::SeqCst)
    }
}

fn question_target(question: &str) -> Option<&str> {
    let lower = question.to_ascii_lowercase();
    let at = lower.rfind("does this image have ")? + "does this image have ".len();
    question.get(at..)?.trim_end().strip_suffix('?')
}

impl Summarizer for LexicalSummarizer {
    fn summarize(&self, question: &str, answer: &str) -> Result<VerdictValue, BackendError> {
        let lower = answer.to_lowercase();
        let first_word = lower
            .split(|c: char| !c.is_alphanumeric())
            .find(|w| *w == "yes" || *w == "no");
        let verdict = match first_word {
            Some("yes") => Some(VerdictValue::Yes),
            Some(_) => Some(VerdictValue::No),
            None => question_target(question)
                .and_then(|t| apply_rules(&self.rules, answer, t))
                .map(|v| v.value),
        };
        Ok(verdict.unwrap_or_else(|| {
            self.non_verdicts.fetch_add(1, Ordering::SeqCst);
            VerdictValue::Unknown
        }))
    }
}
