//! Weak-learner threshold calibration and referral decisions.
//!
//! A weak learner scores each image in `[0,1]`; an image is predicted positive
//! when `score >= threshold`. The threshold is tuned to maximize
//! `w_specificity * TN/(TN+FP) + w_npv * TN/(TN+FN)`.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{ConfusionCounts, Truth};
use crate::prompt::ReferralClause;

/// Threshold that predicts every score in `[0,1]` negative.
pub const ABOVE_MAX_THRESHOLD: f64 = 1.0 + f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub image_id: String,
    pub score: f64,
    pub truth: Truth,
}

impl ScoredSample {
    pub fn new(image_id: impl Into<String>, score: f64, truth: Truth) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} outside [0,1]");
        ScoredSample {
            image_id: image_id.into(),
            score,
            truth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Weight on specificity.
    pub w_specificity: f64,
    /// Weight on negative predictive value.
    pub w_npv: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            w_specificity: 0.2,
            w_npv: 0.8,
        }
    }
}

impl CalibrationConfig {
    pub fn new(w_specificity: f64, w_npv: f64) -> Result<Self, ReferralError> {
        let cfg = CalibrationConfig { w_specificity, w_npv };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ReferralError> {
        let ok = self.w_specificity >= 0.0
            && self.w_npv >= 0.0
            && self.w_specificity.is_finite()
            && self.w_npv.is_finite()
            && self.w_specificity + self.w_npv > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ReferralError::InvalidWeights {
                w_specificity: self.w_specificity,
                w_npv: self.w_npv,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub objective: f64,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Error, PartialEq)]
pub enum ReferralError {
    #[error("calibration needs at least one negative sample")]
    NoNegatives,
    #[error("AUC is undefined for single-class input")]
    SingleClass,
    #[error("invalid calibration weights ({w_specificity}, {w_npv})")]
    InvalidWeights { w_specificity: f64, w_npv: f64 },
    #[error("stated percent {0} must be strictly between 0 and 100")]
    InvalidPercent(u8),
}

pub fn confusion_at_threshold(samples: &[ScoredSample], threshold: f64) -> ConfusionCounts {
    let mut counts = ConfusionCounts::ZERO;
    for s in samples {
        counts.record(s.score >= threshold, s.truth);
    }
    counts
}

/// Weighted specificity + NPV; a zero-denominator term contributes 0.
pub fn objective(counts: &ConfusionCounts, cfg: &CalibrationConfig) -> f64 {
    cfg.w_specificity * counts.specificity() + cfg.w_npv * counts.npv()
}

/// Finds the threshold maximizing [`objective`].
///
/// Candidates are `0`, every distinct score and [`ABOVE_MAX_THRESHOLD`]; the
/// objective is constant between consecutive candidates, so this set is
/// exhaustive. Ties go to the smallest threshold.
pub fn calibrate(samples: &[ScoredSample], cfg: &CalibrationConfig) -> Result<CalibrationResult, ReferralError> {
    cfg.validate()?;
    if !samples.iter().any(|s| s.truth == Truth::Negative) {
        return Err(ReferralError::NoNegatives);
    }
    let mut sorted: Vec<(f64, Truth)> = samples.iter().map(|s| (s.score, s.truth)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let positives = sorted.iter().filter(|(_, t)| t.is_positive()).count() as u64;
    let negatives = sorted.len() as u64 - positives;

    // Everything at or above the candidate is predicted positive.
    let mut counts = ConfusionCounts::new(positives, negatives, 0, 0);
    let mut best: Option<CalibrationResult> = None;
    let mut consider = |threshold: f64, counts: ConfusionCounts| {
        let value = objective(&counts, cfg);
        if best.is_none_or(|b| value > b.objective) {
            best = Some(CalibrationResult {
                threshold,
                objective: value,
                counts,
            });
        }
    };

    let mut i = 0;
    let candidates = std::iter::once(0.0)
        .chain(sorted.iter().map(|(s, _)| *s))
        .chain(std::iter::once(ABOVE_MAX_THRESHOLD));
    let mut last: Option<f64> = None;
    for threshold in candidates {
        if last.is_some_and(|l| threshold <= l) {
            continue;
        }
        last = Some(threshold);
        while i < sorted.len() && sorted[i].0 < threshold {
            match sorted[i].1 {
                Truth::Positive => {
                    counts.tp -= 1;
                    counts.fn_ += 1;
                }
                Truth::Negative => {
                    counts.fp -= 1;
                    counts.tn += 1;
                }
            }
            i += 1;
        }
        consider(threshold, counts);
    }
    Ok(best.expect("candidate set is non-empty"))
}

/// Area under the ROC curve by threshold sweep (trapezoids over distinct
/// scores). Ties contribute one half.
pub fn auc(samples: &[ScoredSample]) -> Result<f64, ReferralError> {
    let positives = samples.iter().filter(|s| s.truth.is_positive()).count() as u128;
    let negatives = samples.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(ReferralError::SingleClass);
    }
    let mut sorted: Vec<(f64, Truth)> = samples.iter().map(|s| (s.score, s.truth)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    // Twice the area in units of (1/P)(1/N), kept integral.
    let mut doubled_area: u128 = 0;
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        let (mut dtp, mut dfp) = (0u128, 0u128);
        while i < sorted.len() && sorted[i].0 == score {
            match sorted[i].1 {
                Truth::Positive => dtp += 1,
                Truth::Negative => dfp += 1,
            }
            i += 1;
        }
        doubled_area += dfp * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
    }
    debug_assert_eq!((tp, fp), (positives, negatives));
    Ok(doubled_area as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferralDirection {
    /// Refer on weak-negative predictions to pull false positives down.
    SuppressFp,
    /// Refer on weak-positive predictions to pull false negatives down.
    SuppressFn,
}

impl std::str::FromStr for ReferralDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "suppress-fp" => Ok(ReferralDirection::SuppressFp),
            "suppress-fn" => Ok(ReferralDirection::SuppressFn),
            other => Err(format!(
                "unknown policy `{other}` (expected suppress-fp or suppress-fn)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferralPolicy {
    pub direction: ReferralDirection,
    pub threshold: f64,
    pub stated_percent_negative: u8,
    pub stated_percent_positive: u8,
}

impl ReferralPolicy {
    pub fn new(direction: ReferralDirection, threshold: f64) -> Self {
        ReferralPolicy {
            direction,
            threshold,
            stated_percent_negative: 10,
            stated_percent_positive: 90,
        }
    }

    pub fn validate(&self) -> Result<(), ReferralError> {
        for n in [self.stated_percent_negative, self.stated_percent_positive] {
            if n == 0 || n >= 100 {
                return Err(ReferralError::InvalidPercent(n));
            }
        }
        Ok(())
    }
}

/// Returns the clause to inject for an image with this weak score, if any.
pub fn decide_referral(policy: &ReferralPolicy, target: &str, score: f64) -> Option<ReferralClause> {
    let stated = match policy.direction {
        ReferralDirection::SuppressFp if score < policy.threshold => policy.stated_percent_negative,
        ReferralDirection::SuppressFn if score >= policy.threshold => policy.stated_percent_positive,
        _ => return None,
    };
    ReferralClause::new(target, stated).ok()
}

/// `(image_id, label)` keyed weak-learner scores, loaded from either a
/// scores file (`image_id,pathology,score`) or a detections file
/// (`image_id,object_label,confidence`; several boxes per pair keep the max).
#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    scores: HashMap<(String, String), f64>,
    order: Vec<(String, String)>,
}

#[derive(Debug, Error)]
pub enum ScoreFileError {
    #[error("{path}: expected header `{expected}`, found `{found}`")]
    Header {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: row {row}: {reason}")]
    Row { path: String, row: usize, reason: String },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreFileKind {
    Scores,
    Detections,
}

impl ScoreFileKind {
    fn header(self) -> [&'static str; 3] {
        match self {
            ScoreFileKind::Scores => ["image_id", "pathology", "score"],
            ScoreFileKind::Detections => ["image_id", "object_label", "confidence"],
        }
    }
}

impl ScoreTable {
    pub fn load(path: &Path, kind: ScoreFileKind) -> Result<Self, ScoreFileError> {
        let name = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| ScoreFileError::Io {
            path: name.clone(),
            source,
        })?;
        Self::parse(file, kind, &name)
    }

    pub fn parse<R: Read>(source: R, kind: ScoreFileKind, name: &str) -> Result<Self, ScoreFileError> {
        let csv_err = |source| ScoreFileError::Csv {
            path: name.to_string(),
            source,
        };
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
        let expected = kind.header();
        let headers = reader.headers().map_err(csv_err)?.clone();
        if headers.iter().map(str::trim).ne(expected.iter().copied()) {
            return Err(ScoreFileError::Header {
                path: name.to_string(),
                expected: expected.join(","),
                found: headers.iter().collect::<Vec<_>>().join(","),
            });
        }
        let mut table = ScoreTable::default();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(csv_err)?;
            let score: f64 = record[2].trim().parse().map_err(|_| ScoreFileError::Row {
                path: name.to_string(),
                row,
                reason: format!("`{}` is not a number", &record[2]),
            })?;
            if !(0.0..=1.0).contains(&score) {
                return Err(ScoreFileError::Row {
                    path: name.to_string(),
                    row,
                    reason: format!("score {score} outside [0,1]"),
                });
            }
            let key = (record[0].trim().to_string(), record[1].trim().to_string());
            match table.scores.get_mut(&key) {
                Some(existing) if kind == ScoreFileKind::Detections => *existing = existing.max(score),
                Some(_) => {
                    return Err(ScoreFileError::Row {
                        path: name.to_string(),
                        row,
                        reason: format!("duplicate score for ({}, {})", key.0, key.1),
                    })
                }
                None => {
                    table.order.push(key.clone());
                    table.scores.insert(key, score);
                }
            }
        }
        Ok(table)
    }

    pub fn insert(&mut self, image_id: impl Into<String>, label: impl Into<String>, score: f64) {
        let key = (image_id.into(), label.into());
        if self.scores.insert(key.clone(), score).is_none() {
            self.order.push(key);
        }
    }

    pub fn get(&self, image_id: &str, label: &str) -> Option<f64> {
        self.scores.get(&(image_id.to_string(), label.to_string())).copied()
    }

    /// Rows for one label in file order.
    pub fn rows_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = (&'a str, f64)> + 'a {
        self.order
            .iter()
            .filter(move |(_, l)| l == label)
            .map(move |k| (k.0.as_str(), self.scores[k]))
    }

    /// Distinct labels in first-seen order.
    pub fn labels(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.order
            .iter()
            .filter(|(_, l)| seen.insert(l.as_str()))
            .map(|(_, l)| l.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}
