//! Confusion-count accumulation and the metrics derived from it.
//!
//! Every reported number (precision, recall, F1, FP deltas, POPE rows) is a
//! pure function of [`ConfusionCounts`]. Zero denominators yield 0.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normalize::VerdictValue;

/// Binary ground truth of a single question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Positive,
    Negative,
}

impl Truth {
    pub fn is_positive(self) -> bool {
        matches!(self, Truth::Positive)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub const ZERO: ConfusionCounts = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };

    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Ground-truth positives seen (`tp + fn`).
    pub fn actual_positives(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Records one binary prediction against its truth.
    pub fn record(&mut self, predicted_positive: bool, truth: Truth) {
        match (predicted_positive, truth) {
            (true, Truth::Positive) => self.tp += 1,
            (true, Truth::Negative) => self.fp += 1,
            (false, Truth::Negative) => self.tn += 1,
            (false, Truth::Positive) => self.fn_ += 1,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn npv(&self) -> f64 {
        ratio(self.tn, self.tn + self.fn_)
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, rhs: Self) -> Self {
        merge(self, rhs)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = merge(*self, rhs);
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::ZERO, merge)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Fieldwise sum.
pub fn merge(a: ConfusionCounts, b: ConfusionCounts) -> ConfusionCounts {
    ConfusionCounts {
        tp: a.tp + b.tp,
        fp: a.fp + b.fp,
        tn: a.tn + b.tn,
        fn_: a.fn_ + b.fn_,
    }
}

/// How an `Unknown` verdict is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnknownPolicy {
    #[default]
    AsNegative,
    AsPositive,
}

/// Counts plus the number of `Unknown` verdicts folded into them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub counts: ConfusionCounts,
    pub unknown: u64,
}

impl Tally {
    pub fn accumulate(&mut self, verdict: VerdictValue, truth: Truth, policy: UnknownPolicy) {
        *self = accumulate(*self, verdict, truth, policy);
    }

    pub fn merge(self, other: Tally) -> Tally {
        Tally {
            counts: merge(self.counts, other.counts),
            unknown: self.unknown + other.unknown,
        }
    }
}

/// Adds one verdict to a tally. `Unknown` is mapped through `policy` and also
/// counted in `unknown`.
pub fn accumulate(mut tally: Tally, verdict: VerdictValue, truth: Truth, policy: UnknownPolicy) -> Tally {
    let predicted_positive = match verdict {
        VerdictValue::Yes => true,
        VerdictValue::No => false,
        VerdictValue::Unknown => {
            tally.unknown += 1;
            matches!(policy, UnknownPolicy::AsPositive)
        }
    };
    tally.counts.record(predicted_positive, truth);
    tally
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 from counts; any zero denominator yields 0.
pub fn prf1(counts: &ConfusionCounts) -> Prf1 {
    let precision = counts.precision();
    let recall = counts.recall();
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf1 { precision, recall, f1 }
}

/// Rounds a `[0,1]` ratio to one decimal of percent, half away from zero.
pub fn percent_1dp(ratio: f64) -> f64 {
    (ratio * 1000.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub pathology: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub unknown_count: u64,
}

impl MetricsRow {
    pub fn from_tally(pathology: impl Into<String>, tally: Tally) -> Self {
        let Prf1 { precision, recall, f1 } = prf1(&tally.counts);
        MetricsRow {
            pathology: pathology.into(),
            precision,
            recall,
            f1,
            counts: tally.counts,
            unknown_count: tally.unknown,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportShapeError {
    #[error("pathology sets differ between runs: only in first {only_a:?}, only in second {only_b:?}")]
    PathologyMismatch { only_a: Vec<String>, only_b: Vec<String> },
    #[error("record {index} has no POPE category")]
    UntaggedRecord { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpDeltaRow {
    pub pathology: String,
    pub fp_a: u64,
    pub fp_b: u64,
}

impl FpDeltaRow {
    pub fn delta(&self) -> i64 {
        self.fp_b as i64 - self.fp_a as i64
    }
}

/// Aligns the false-positive counts of two runs by pathology, in `run_a`'s order.
pub fn fp_delta(
    run_a: &[(String, ConfusionCounts)],
    run_b: &[(String, ConfusionCounts)],
) -> Result<Vec<FpDeltaRow>, ReportShapeError> {
    let names_a: BTreeSet<&str> = run_a.iter().map(|(p, _)| p.as_str()).collect();
    let names_b: BTreeSet<&str> = run_b.iter().map(|(p, _)| p.as_str()).collect();
    if names_a != names_b {
        return Err(ReportShapeError::PathologyMismatch {
            only_a: names_a.difference(&names_b).map(|s| s.to_string()).collect(),
            only_b: names_b.difference(&names_a).map(|s| s.to_string()).collect(),
        });
    }
    Ok(run_a
        .iter()
        .map(|(pathology, a)| {
            let b = run_b
                .iter()
                .find(|(p, _)| p == pathology)
                .map(|(_, c)| c)
                .expect("pathology sets checked equal");
            FpDeltaRow {
                pathology: pathology.clone(),
                fp_a: a.fp,
                fp_b: b.fp,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeCategory {
    Adversarial,
    Popular,
    Random,
}

impl PopeCategory {
    pub const ALL: [PopeCategory; 3] = [PopeCategory::Adversarial, PopeCategory::Popular, PopeCategory::Random];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adversarial" => Some(PopeCategory::Adversarial),
            "popular" => Some(PopeCategory::Popular),
            "random" => Some(PopeCategory::Random),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PopeCategory::Adversarial => "adversarial",
            PopeCategory::Popular => "popular",
            PopeCategory::Random => "random",
        }
    }
}

impl fmt::Display for PopeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PopeCategory::Adversarial => "Adversarial",
            PopeCategory::Popular => "Popular",
            PopeCategory::Random => "Random",
        };
        f.write_str(name)
    }
}

/// One answered POPE question, reduced to what scoring needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopeObservation {
    pub category: Option<PopeCategory>,
    pub verdict: VerdictValue,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeRow {
    pub category: PopeCategory,
    pub metrics: MetricsRow,
    /// Set when no question fell into this category.
    pub empty: bool,
}

/// Per-category metrics, always one row per category in
/// Adversarial/Popular/Random order.
pub fn pope_report(observations: &[PopeObservation], policy: UnknownPolicy) -> Result<Vec<PopeRow>, ReportShapeError> {
    let mut tallies = [Tally::default(); 3];
    let mut seen = [false; 3];
    for (index, obs) in observations.iter().enumerate() {
        let category = obs.category.ok_or(ReportShapeError::UntaggedRecord { index })?;
        let slot = category as usize;
        tallies[slot].accumulate(obs.verdict, obs.truth, policy);
        seen[slot] = true;
    }
    Ok(PopeCategory::ALL
        .iter()
        .map(|&category| {
            let slot = category as usize;
            if !seen[slot] {
                log::warn!("POPE category {category} has no records");
            }
            PopeRow {
                category,
                metrics: MetricsRow::from_tally(category.to_string(), tallies[slot]),
                empty: !seen[slot],
            }
        })
        .collect())
}
