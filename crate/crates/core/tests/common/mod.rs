#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use medvqa::backend::ReplayEntry;
use medvqa::config::RunConfig;
use medvqa::pipeline::prepare_questions;
use medvqa::prompt::TemplateId;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn replay20() -> PathBuf {
    fixtures().join("replay20")
}

/// Loads a fixture config with its output redirected to `out`.
pub fn config(name: &str, template: TemplateId, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&replay20().join(name)).expect("fixture config");
    cfg.template = template;
    cfg.out = out.to_path_buf();
    cfg
}

/// `(template, image_id, target) -> answer` from the hand-written answer sheet.
pub fn answer_sheet() -> HashMap<(String, String, String), String> {
    let mut reader = csv::Reader::from_path(replay20().join("answers.csv")).unwrap();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            ((r[0].to_string(), r[1].to_string(), r[2].to_string()), r[3].to_string())
        })
        .collect()
}

/// Replay entries for every fixture run, built by rendering the prompts and
/// attaching the answer sheet's text.
pub fn replay_entries() -> Vec<ReplayEntry> {
    let sheet = answer_sheet();
    let out = std::env::temp_dir();
    let runs = [
        ("chexpert.toml", TemplateId::Pt1),
        ("chexpert.toml", TemplateId::Pt2),
        ("chexpert.toml", TemplateId::Pt3),
        ("pope.toml", TemplateId::Pt1),
        ("pope.toml", TemplateId::Pt3),
    ];
    let mut by_key: HashMap<String, ReplayEntry> = HashMap::new();
    let mut order = Vec::new();
    for (name, template) in runs {
        for q in prepare_questions(&config(name, template, &out)).unwrap() {
            let answer = &sheet[&(template.as_str().to_string(), q.image_id.clone(), q.pathology.clone())];
            let entry = ReplayEntry::new(&q.image_id, &q.prompt, answer.clone());
            match by_key.get(&entry.key) {
                Some(seen) => assert_eq!(seen.text, entry.text, "conflicting answers for {}", entry.key),
                None => {
                    order.push(entry.key.clone());
                    by_key.insert(entry.key.clone(), entry);
                }
            }
        }
    }
    order.into_iter().map(|k| by_key.remove(&k).unwrap()).collect()
}

/// Oracles computed from first principles, sharing no code with the crate.
pub mod oracle {
    use medvqa::metrics::Truth;
    use medvqa::referral::ScoredSample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `(tp, fp, tn, fn)` with "positive iff score >= d".
    pub fn counts(samples: &[ScoredSample], d: f64) -> (u64, u64, u64, u64) {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for s in samples {
            match (s.score >= d, s.truth == Truth::Positive) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        (tp, fp, tn, fn_)
    }

    pub fn objective(fp: u64, tn: u64, fn_: u64, w1: f64, w2: f64) -> f64 {
        let spec = if tn + fp == 0 {
            0.0
        } else {
            tn as f64 / (tn + fp) as f64
        };
        let npv = if tn + fn_ == 0 {
            0.0
        } else {
            tn as f64 / (tn + fn_) as f64
        };
        w1 * spec + w2 * npv
    }

    /// Exhaustive sweep: every candidate threshold evaluated from scratch.
    /// Returns `(best objective, smallest maximizing threshold)`.
    pub fn sweep(samples: &[ScoredSample], w1: f64, w2: f64) -> (f64, f64) {
        let mut candidates: Vec<f64> = vec![0.0, 1.0 + f64::EPSILON];
        candidates.extend(samples.iter().map(|s| s.score));
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        for d in candidates {
            let (_, fp, tn, fn_) = counts(samples, d);
            let value = objective(fp, tn, fn_, w1, w2);
            if value > best.0 {
                best = (value, d);
            }
        }
        best
    }

    /// Mann-Whitney statistic over all positive/negative pairs, ties worth one half.
    pub fn pairwise_auc(samples: &[ScoredSample]) -> f64 {
        let pos: Vec<f64> = samples
            .iter()
            .filter(|s| s.truth == Truth::Positive)
            .map(|s| s.score)
            .collect();
        let neg: Vec<f64> = samples
            .iter()
            .filter(|s| s.truth == Truth::Negative)
            .map(|s| s.score)
            .collect();
        let mut doubled = 0u64;
        for p in &pos {
            for n in &neg {
                doubled += if p > n {
                    2
                } else if p == n {
                    1
                } else {
                    0
                };
            }
        }
        doubled as f64 / (2 * pos.len() * neg.len()) as f64
    }

    /// Seeded random scores on a `grid`-step lattice so that ties are
    /// common; `grid == 0` draws continuous scores instead.
    pub fn random_samples(seed: u64, n: usize, grid: u32, p_positive: f64) -> Vec<ScoredSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let truth = if rng.gen_bool(p_positive) {
                    Truth::Positive
                } else {
                    Truth::Negative
                };
                let score = match grid {
                    0 => rng.gen_range(0.0..=1.0),
                    g => rng.gen_range(0..=g) as f64 / g as f64,
                };
                ScoredSample::new(format!("s{i}"), score, truth)
            })
            .collect()
    }

    pub fn prf1(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
        let p = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let r = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}
