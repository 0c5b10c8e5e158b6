//! Prompt templates PT1/PT2/PT3 and the pathology explanation registry.
//!
//! Rendering is byte-exact:
//!
//! - PT1: `Does this image have {target}?`
//! - PT2: `{explanation} Given the information above, does this image have {target}?`
//! - PT3: `{explanation} For this image, another agent thinks the probability that it has {target} is {n} percent. Given the information above, does this image have {target}?`

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Registry shipped with the crate: the five chest X-ray pathology explanations.
pub const DEFAULT_REGISTRY_TOML: &str = include_str!("../data/explanations.toml");

const QUESTION_LEAD: &str = "Given the information above, does this image have";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    Pt1,
    Pt2,
    Pt3,
}

impl TemplateId {
    pub fn needs_explanation(self) -> bool {
        !matches!(self, TemplateId::Pt1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Pt1 => "pt1",
            TemplateId::Pt2 => "pt2",
            TemplateId::Pt3 => "pt3",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_ascii_uppercase())
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pt1" => Ok(TemplateId::Pt1),
            "pt2" => Ok(TemplateId::Pt2),
            "pt3" => Ok(TemplateId::Pt3),
            other => Err(format!("unknown template `{other}` (expected pt1, pt2 or pt3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathologyExplanation {
    pub pathology: String,
    pub body: String,
}

/// Parameters of the sentence
/// `For this image, another agent thinks the probability that it has {target} is {n} percent.`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferralClause {
    pub target: String,
    stated_percent: u8,
}

impl ReferralClause {
    /// `stated_percent` must lie strictly between 0 and 100.
    pub fn new(target: impl Into<String>, stated_percent: u8) -> Result<Self, PromptError> {
        if stated_percent == 0 || stated_percent >= 100 {
            return Err(PromptError::ExtremePercent(stated_percent));
        }
        Ok(ReferralClause {
            target: target.into(),
            stated_percent,
        })
    }

    pub fn stated_percent(&self) -> u8 {
        self.stated_percent
    }

    pub fn sentence(&self) -> String {
        format!(
            "For this image, another agent thinks the probability that it has {} is {} percent.",
            self.target, self.stated_percent
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub template: TemplateId,
    pub target: String,
    pub explanation: Option<PathologyExplanation>,
    pub referral: Option<ReferralClause>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{0} requires a pathology explanation")]
    MissingExplanation(TemplateId),
    #[error("PT3 requires a referral clause")]
    MissingReferral,
    #[error("{0} does not take a referral clause")]
    UnexpectedReferral(TemplateId),
    #[error("referral clause targets `{clause}` but the question targets `{target}`")]
    ReferralTargetMismatch { target: String, clause: String },
    #[error("stated percent {0} must be strictly between 0 and 100")]
    ExtremePercent(u8),
    #[error("no explanation registered for `{0}`")]
    NotFound(String),
    #[error("explanation for `{0}` is empty")]
    EmptyBody(String),
    #[error("explanation for `{0}` still ends with a question after canonicalization")]
    TrailingQuestion(String),
    #[error("duplicate explanation for `{0}`")]
    Duplicate(String),
    #[error("explanation registry: {0}")]
    Format(String),
}

pub fn render(spec: &PromptSpec) -> Result<String, PromptError> {
    let target = &spec.target;
    match spec.template {
        TemplateId::Pt1 => {
            if spec.referral.is_some() {
                return Err(PromptError::UnexpectedReferral(TemplateId::Pt1));
            }
            Ok(format!("Does this image have {target}?"))
        }
        TemplateId::Pt2 => {
            let explanation = spec
                .explanation
                .as_ref()
                .ok_or(PromptError::MissingExplanation(TemplateId::Pt2))?;
            if spec.referral.is_some() {
                return Err(PromptError::UnexpectedReferral(TemplateId::Pt2));
            }
            Ok(format!("{} {QUESTION_LEAD} {target}?", explanation.body))
        }
        TemplateId::Pt3 => {
            let explanation = spec
                .explanation
                .as_ref()
                .ok_or(PromptError::MissingExplanation(TemplateId::Pt3))?;
            let referral = spec.referral.as_ref().ok_or(PromptError::MissingReferral)?;
            if &referral.target != target {
                return Err(PromptError::ReferralTargetMismatch {
                    target: target.clone(),
                    clause: referral.target.clone(),
                });
            }
            Ok(format!(
                "{} {} {QUESTION_LEAD} {target}?",
                explanation.body,
                referral.sentence()
            ))
        }
    }
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    #[allow(dead_code)]
    version: Option<u32>,
    #[serde(default)]
    explanation: Vec<PathologyExplanation>,
}

/// Immutable mapping finding name to explanation body.
#[derive(Debug, Clone, Default)]
pub struct ExplanationRegistry {
    entries: BTreeMap<String, String>,
}

impl ExplanationRegistry {
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_REGISTRY_TOML).expect("shipped registry is valid")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PromptError::Format(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Parses a registry document. Bodies that still carry the closing
    /// "Given the information above, does this image have X?" sentence are
    /// trimmed back to the explanation alone.
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| PromptError::Format(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for PathologyExplanation { pathology, body } in file.explanation {
            let body = canonical_body(&pathology, &body)?;
            if entries.insert(pathology.clone(), body).is_some() {
                return Err(PromptError::Duplicate(pathology));
            }
        }
        Ok(ExplanationRegistry { entries })
    }

    pub fn insert(&mut self, pathology: impl Into<String>, body: &str) -> Result<(), PromptError> {
        let pathology = pathology.into();
        let body = canonical_body(&pathology, body)?;
        self.entries.insert(pathology, body);
        Ok(())
    }

    pub fn lookup(&self, pathology: &str) -> Result<PathologyExplanation, PromptError> {
        self.entries
            .get(pathology)
            .map(|body| PathologyExplanation {
                pathology: pathology.to_string(),
                body: body.clone(),
            })
            .ok_or_else(|| PromptError::NotFound(pathology.to_string()))
    }

    pub fn contains(&self, pathology: &str) -> bool {
        self.entries.contains_key(pathology)
    }

    pub fn pathologies(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Raw body text by pathology, for hashing into run identities.
    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }
}

fn canonical_body(pathology: &str, body: &str) -> Result<String, PromptError> {
    let mut trimmed = body.trim_end();
    let question = format!("{QUESTION_LEAD} {pathology}?");
    if let Some(rest) = trimmed.strip_suffix(question.as_str()) {
        trimmed = rest.trim_end();
    }
    if trimmed.trim().is_empty() {
        return Err(PromptError::EmptyBody(pathology.to_string()));
    }
    if trimmed.ends_with('?') && trimmed.to_ascii_lowercase().contains("does this image have") {
        return Err(PromptError::TrailingQuestion(pathology.to_string()));
    }
    Ok(trimmed.to_string())
}
