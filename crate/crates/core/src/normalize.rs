//! Reduction of free-text answers to Yes / No / Unknown.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Summarizer;

pub const DEFAULT_RULES_TOML: &str = include_str!("../data/rules.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictValue {
    Yes,
    No,
    Unknown,
}

impl fmt::Display for VerdictValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictValue::Yes => "yes",
            VerdictValue::No => "no",
            VerdictValue::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", content = "rule", rename_all = "lowercase")]
pub enum VerdictSource {
    Rule(String),
    Summarizer,
    /// No rule matched and no summarizer was configured.
    Unmatched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub value: VerdictValue,
    #[serde(flatten)]
    pub source: VerdictSource,
}

impl Verdict {
    pub fn rule_id(&self) -> Option<&str> {
        match &self.source {
            VerdictSource::Rule(id) => Some(id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    LeadingAffirmation,
    LeadingNegation,
    NegationNearTarget,
    AffirmationNearTarget,
}

impl RuleKind {
    fn verdict(self) -> VerdictValue {
        match self {
            RuleKind::LeadingAffirmation | RuleKind::AffirmationNearTarget => VerdictValue::Yes,
            RuleKind::LeadingNegation | RuleKind::NegationNearTarget => VerdictValue::No,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub kind: RuleKind,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub version: u32,
    #[serde(rename = "rule")]
    pub rules: Vec<Rule>,
}

#[derive(Debug, Error)]
pub enum RuleSetError {
    #[error("rule file: {0}")]
    Parse(String),
    #[error("rule file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("duplicate rule id `{0}`")]
    DuplicateId(String),
}

impl RuleSet {
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_RULES_TOML).expect("shipped rules are valid")
    }

    pub fn load(path: &Path) -> Result<Self, RuleSetError> {
        let text = std::fs::read_to_string(path).map_err(|source| RuleSetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, RuleSetError> {
        let mut set: RuleSet = toml::from_str(text).map_err(|e| RuleSetError::Parse(e.to_string()))?;
        let mut ids = std::collections::HashSet::new();
        for rule in &mut set.rules {
            if !ids.insert(rule.id.clone()) {
                return Err(RuleSetError::DuplicateId(rule.id.clone()));
            }
            for p in &mut rule.patterns {
                *p = p.to_lowercase();
            }
        }
        Ok(set)
    }
}

/// Ordered lexical rules with an optional summarizer fallback.
#[derive(Clone)]
pub struct Normalizer {
    rules: RuleSet,
    summarizer: Option<Arc<dyn Summarizer>>,
}

impl fmt::Debug for Normalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Normalizer")
            .field("rules", &self.rules.version)
            .field("summarizer", &self.summarizer.is_some())
            .finish()
    }
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer::new(RuleSet::builtin(), None)
    }
}

impl Normalizer {
    pub fn new(rules: RuleSet, summarizer: Option<Arc<dyn Summarizer>>) -> Self {
        Normalizer { rules, summarizer }
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    /// Normalizes `answer` to a question about `target`. `question` is only
    /// forwarded to the summarizer.
    pub fn normalize(&self, question: &str, answer: &str, target: &str) -> Verdict {
        if let Some(verdict) = apply_rules(&self.rules, answer, target) {
            return verdict;
        }
        match &self.summarizer {
            Some(summarizer) => {
                let value = summarizer.summarize(question, answer).unwrap_or_else(|e| {
                    log::warn!("summarizer failed, scoring as unknown: {e}");
                    VerdictValue::Unknown
                });
                Verdict {
                    value,
                    source: VerdictSource::Summarizer,
                }
            }
            None => Verdict {
                value: VerdictValue::Unknown,
                source: VerdictSource::Unmatched,
            },
        }
    }
}

/// Applies the rule set alone; `None` when nothing matches.
pub fn apply_rules(rules: &RuleSet, answer: &str, target: &str) -> Option<Verdict> {
    let folded = answer.to_lowercase();
    let text = folded.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '*' | '`'));
    let target = target.to_lowercase();
    let first = leading_token(text);

    for rule in &rules.rules {
        let hit = match rule.kind {
            RuleKind::LeadingAffirmation => rule.patterns.iter().any(|p| first == p),
            RuleKind::LeadingNegation => {
                rule.patterns.iter().any(|p| first == p) && !opens_near_target_negation(rules, text, &target)
            }
            RuleKind::NegationNearTarget | RuleKind::AffirmationNearTarget => {
                !target.is_empty() && pattern_near_target(&rule.patterns, text, &target)
            }
        };
        if hit {
            return Some(Verdict {
                value: rule.kind.verdict(),
                source: VerdictSource::Rule(rule.id.clone()),
            });
        }
    }
    None
}

fn leading_token(text: &str) -> &str {
    let end = text.find(|c: char| !c.is_alphanumeric()).unwrap_or(text.len());
    &text[..end]
}

/// True when the answer starts with a negation pattern ("no evidence of ...")
/// that shares its sentence with the target.
fn opens_near_target_negation(rules: &RuleSet, text: &str, target: &str) -> bool {
    let first_sentence = sentences(text).next().unwrap_or("");
    rules
        .rules
        .iter()
        .filter(|r| r.kind == RuleKind::NegationNearTarget)
        .flat_map(|r| r.patterns.iter())
        .any(|p| {
            first_sentence.starts_with(p.as_str())
                && is_boundary(first_sentence, p.len())
                && contains_word(first_sentence, target)
        })
}

fn pattern_near_target(patterns: &[String], text: &str, target: &str) -> bool {
    sentences(text).any(|s| contains_word(s, target) && patterns.iter().any(|p| contains_word(s, p)))
}

fn sentences(text: &str) -> impl Iterator<Item = &str> {
    text.split(['.', '!', '?', ';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

fn is_boundary(s: &str, idx: usize) -> bool {
    s[idx..].chars().next().is_none_or(|c| !c.is_alphanumeric())
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    haystack.match_indices(needle).any(|(start, _)| {
        let before_ok = haystack[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        before_ok && is_boundary(haystack, start + needle.len())
    })
}
