//! Aligned text tables for run reports. Percentages are shown with one
//! decimal, rounded half away from zero.

use std::fmt::Write as _;

use crate::metrics::{percent_1dp, FpDeltaRow, MetricsRow, PopeCategory, PopeRow};
use crate::pipeline::CalibrationReport;

fn pct(x: f64) -> String {
    format!("{:.1}", percent_1dp(x))
}

type Cell = fn(&MetricsRow) -> String;

struct Table {
    rows: Vec<Vec<String>>,
    /// Columns after the first are right-aligned.
    rules_after: Vec<usize>,
}

impl Table {
    fn new(header: Vec<String>) -> Self {
        Table {
            rows: vec![header],
            rules_after: vec![0],
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn rule(&mut self) {
        self.rules_after.push(self.rows.len() - 1);
    }

    fn render(&self) -> String {
        let cols = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                self.rows
                    .iter()
                    .filter_map(|r| r.get(c))
                    .map(|s| s.chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
        let mut out = String::new();
        for (i, row) in self.rows.iter().enumerate() {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                if c > 0 {
                    line.push_str("  ");
                }
                if c < 2 && !cell.chars().next().is_some_and(|ch| ch.is_ascii_digit()) {
                    let _ = write!(line, "{:<w$}", cell, w = widths[c]);
                } else {
                    let _ = write!(line, "{:>w$}", cell, w = widths[c]);
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
            if self.rules_after.contains(&i) && i + 1 < self.rows.len() {
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }
}

/// Pathology x {Precision, Recall, F1} rows, one column per run.
pub fn metrics_table(runs: &[(String, Vec<MetricsRow>)]) -> String {
    let mut header = vec!["Pathology".to_string(), "Metric".to_string()];
    header.extend(runs.iter().map(|(label, _)| label.clone()));
    let mut t = Table::new(header);
    let show_unknown = runs.iter().flat_map(|(_, rows)| rows).any(|r| r.unknown_count > 0);
    let pathologies: Vec<&str> = runs
        .first()
        .map(|(_, rows)| rows.iter().map(|r| r.pathology.as_str()).collect())
        .unwrap_or_default();
    for (i, pathology) in pathologies.iter().enumerate() {
        if i > 0 {
            t.rule();
        }
        let lookup = |rows: &Vec<MetricsRow>| rows.iter().find(|r| r.pathology == *pathology).cloned();
        let mut metrics: Vec<(&str, Cell)> = vec![
            ("Precision", |r| pct(r.precision)),
            ("Recall", |r| pct(r.recall)),
            ("F1", |r| pct(r.f1)),
        ];
        if show_unknown {
            metrics.push(("Unknown", |r| r.unknown_count.to_string()));
        }
        for (j, (name, value)) in metrics.iter().enumerate() {
            let mut row = vec![
                if j == 0 { pathology.to_string() } else { String::new() },
                name.to_string(),
            ];
            row.extend(
                runs.iter()
                    .map(|(_, rows)| lookup(rows).map(|r| value(&r)).unwrap_or_else(|| "-".into())),
            );
            t.push(row);
        }
    }
    t.render()
}

/// Pathology / TP / FP / FN for one run.
pub fn counts_table(rows: &[MetricsRow]) -> String {
    let mut t = Table::new(vec![
        "Pathology".into(),
        "TP".into(),
        "FP".into(),
        "FN".into(),
        "TN".into(),
    ]);
    for r in rows {
        t.push(vec![
            r.pathology.clone(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.fn_.to_string(),
            r.counts.tn.to_string(),
        ]);
    }
    t.render()
}

/// False-positive counts of two runs side by side.
pub fn fp_delta_table(label_a: &str, label_b: &str, rows: &[FpDeltaRow]) -> String {
    let mut t = Table::new(vec![
        "Pathology".into(),
        label_a.into(),
        label_b.into(),
        "Change".into(),
    ]);
    for r in rows {
        let change = if r.fp_a == 0 {
            format!("{:+}", r.delta())
        } else {
            format!("{:+} ({:+.1}%)", r.delta(), 100.0 * r.delta() as f64 / r.fp_a as f64)
        };
        t.push(vec![
            r.pathology.clone(),
            r.fp_a.to_string(),
            r.fp_b.to_string(),
            change,
        ]);
    }
    t.render()
}

/// One row per run, P/R/F1 under each POPE category.
pub fn pope_table(runs: &[(String, Vec<PopeRow>)]) -> String {
    let mut header = vec!["Model".to_string()];
    for c in PopeCategory::ALL {
        for m in ["Precision", "Recall", "F1"] {
            header.push(format!("{c} {m}"));
        }
    }
    let mut t = Table::new(header);
    for (label, rows) in runs {
        let mut row = vec![label.clone()];
        for c in PopeCategory::ALL {
            match rows.iter().find(|r| r.category == c) {
                Some(r) if !r.empty => {
                    row.push(pct(r.metrics.precision));
                    row.push(pct(r.metrics.recall));
                    row.push(pct(r.metrics.f1));
                }
                _ => row.extend(["-".to_string(), "-".to_string(), "-".to_string()]),
            }
        }
        t.push(row);
    }
    t.render()
}

/// Weak-learner table: AUC and the metrics at the tuned threshold.
pub fn weak_learner_table(reports: &[CalibrationReport]) -> String {
    let mut t = Table::new(
        [
            "Pathology",
            "AUC",
            "Precision",
            "Recall",
            "F1",
            "Threshold",
            "Objective",
        ]
        .map(String::from)
        .to_vec(),
    );
    for r in reports {
        let m = crate::metrics::prf1(&r.counts);
        t.push(vec![
            r.pathology.clone(),
            r.auc.map(pct).unwrap_or_else(|| "-".into()),
            pct(m.precision),
            pct(m.recall),
            pct(m.f1),
            format!("{:.4}", r.threshold),
            format!("{:.4}", r.objective),
        ]);
    }
    t.render()
}
