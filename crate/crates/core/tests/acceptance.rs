//! Acceptance suite. Runs without the libtest harness so the scorecard, one
//! PASS/FAIL line per criterion, is always printed; exits non-zero if any
//! criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::oracle;
use medvqa::config::{BackendKind, RunConfig};
use medvqa::metrics::{accumulate, percent_1dp, prf1, ConfusionCounts, PopeCategory, Tally, Truth, UnknownPolicy};
use medvqa::pipeline::{run_eval, run_report, RunOutcome};
use medvqa::prompt::{render, ExplanationRegistry, PromptSpec, ReferralClause, TemplateId};
use medvqa::referral::{auc, calibrate, objective, CalibrationConfig, ScoredSample};
use rand::{Rng, SeedableRng};

fn check_time(failures: &mut Vec<String>, elapsed: Duration, limit: Duration) {
    if elapsed >= limit {
        failures.push(format!("took {elapsed:?}, limit {limit:?}"));
    }
}

fn criterion_1_metric_cross_check() -> Vec<String> {
    let start = Instant::now();
    // (pathology, tp, fp, fn, published precision / recall / F1)
    let published = [
        ("Atelectasis", 163, 453, 15, [26.5, 91.6, 41.0]),
        ("Cardiomegaly", 151, 430, 24, [26.0, 86.3, 40.0]),
        ("Edema", 65, 410, 20, [13.7, 76.5, 23.2]),
        ("Pleural Effusion", 108, 495, 12, [17.9, 90.0, 29.9]),
    ];
    let mut failures = Vec::new();
    for (name, tp, fp, fn_, expected) in published {
        let m = prf1(&ConfusionCounts::new(tp, fp, 0, fn_));
        let (p, r, f) = oracle::prf1(tp, fp, fn_);
        if (m.precision, m.recall) != (p, r) || (m.f1 - f).abs() > 1e-12 {
            failures.push(format!("{name}: prf1 disagrees with the independent formula"));
        }
        for (metric, got, want) in [
            ("precision", m.precision, expected[0]),
            ("recall", m.recall, expected[1]),
            ("F1", m.f1, expected[2]),
        ] {
            let shown = percent_1dp(got);
            if (shown - want).abs() > 0.05 + 1e-9 {
                failures.push(format!(
                    "{name} {metric}: computed {shown:.1} ({:.3}), published {want:.1}",
                    got * 100.0
                ));
            }
        }
    }
    check_time(&mut failures, start.elapsed(), Duration::from_secs(1));
    failures
}

fn criterion_2_calibration_matches_exhaustive_sweep() -> Vec<String> {
    let cfg = CalibrationConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    let mut spent = Duration::ZERO;
    for set in 0..200u64 {
        let n = rng.gen_range(1..=1000);
        let grid = if set % 2 == 0 { rng.gen_range(2..50) } else { 0 };
        let p = rng.gen_range(0.05..0.95);
        let mut samples = oracle::random_samples(1000 + set, n, grid, p);
        if samples.iter().all(|s| s.truth == Truth::Positive) {
            samples[0].truth = Truth::Negative;
        }
        let start = Instant::now();
        let got = calibrate(&samples, &cfg).unwrap();
        spent += start.elapsed();
        let (value, threshold) = oracle::sweep(&samples, cfg.w_specificity, cfg.w_npv);
        if got.objective != value || got.threshold != threshold {
            failures.push(format!(
                "set {set} (n={n}): got ({}, {}), oracle ({value}, {threshold})",
                got.objective, got.threshold
            ));
        }
    }
    check_time(&mut failures, spent, Duration::from_secs(10));
    failures
}

fn criterion_3_objective_edge_cases() -> Vec<String> {
    let cfg = CalibrationConfig::default();
    let mut failures = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if got != want {
            failures.push(format!("{what}: got {got:?}, want {want:?}"));
        }
    };

    let separable: Vec<ScoredSample> = (0..10)
        .map(|i| {
            let truth = if i < 5 { Truth::Negative } else { Truth::Positive };
            ScoredSample::new(format!("s{i}"), i as f64 / 10.0, truth)
        })
        .collect();
    check(
        "perfect separation",
        calibrate(&separable, &cfg).unwrap().objective,
        1.0,
    );

    // tp, fp, tn, fn
    check("TN = 0", objective(&ConfusionCounts::new(5, 3, 0, 2), &cfg), 0.0);
    check(
        "TN=1 FP=1 FN=0",
        objective(&ConfusionCounts::new(0, 1, 1, 0), &cfg),
        0.9,
    );
    check(
        "TN=3 FP=1 FN=2",
        objective(&ConfusionCounts::new(4, 1, 3, 2), &cfg),
        oracle::objective(1, 3, 2, 0.2, 0.8),
    );
    check(
        "TN=3 FP=1 FN=2 by hand",
        objective(&ConfusionCounts::new(4, 1, 3, 2), &cfg),
        0.2 * 0.75 + 0.8 * 0.6,
    );
    let skewed = CalibrationConfig::new(0.7, 0.3).unwrap();
    check(
        "weights (0.7, 0.3)",
        objective(&ConfusionCounts::new(0, 2, 6, 3), &skewed),
        0.7 * (6.0 / 8.0) + 0.3 * (6.0 / 9.0),
    );
    failures
}

fn criterion_4_prompt_bytes_match_golden_files() -> Vec<String> {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let registry = ExplanationRegistry::builtin();
    let mut failures = Vec::new();
    let mut compared = 0;
    for target in [
        "Atelectasis",
        "Cardiomegaly",
        "Consolidation",
        "Edema",
        "Pleural Effusion",
    ] {
        for template in [TemplateId::Pt1, TemplateId::Pt2, TemplateId::Pt3] {
            let spec = PromptSpec {
                template,
                target: target.into(),
                explanation: template.needs_explanation().then(|| registry.lookup(target).unwrap()),
                referral: (template == TemplateId::Pt3).then(|| ReferralClause::new(target, 10).unwrap()),
            };
            let file = golden.join(format!(
                "{}_{}.txt",
                template.as_str(),
                target.to_lowercase().replace(' ', "_")
            ));
            let want = std::fs::read(&file).unwrap();
            let got = render(&spec).unwrap();
            compared += 1;
            if got.as_bytes() != want.as_slice() {
                let at = got
                    .bytes()
                    .zip(&want)
                    .position(|(a, b)| a != *b)
                    .unwrap_or(got.len().min(want.len()));
                failures.push(format!("{} differs at byte {at}", file.display()));
            }
        }
    }
    assert_eq!(compared, 15);
    failures
}

fn write_negatives(dir: &Path, n: usize) {
    let mut labels = String::from("Path,Edema\n");
    let mut scores = String::from("image_id,pathology,score\n");
    for i in 0..n {
        labels.push_str(&format!("neg{i:04}.jpg,0.0\n"));
        scores.push_str(&format!("neg{i:04}.jpg,Edema,{}\n", (i % 40) as f64 / 100.0));
    }
    std::fs::write(dir.join("labels.csv"), labels).unwrap();
    std::fs::write(dir.join("scores.csv"), scores).unwrap();
}

const SIM_CONFIG: &str = r#"
template = "pt2"
pathologies = ["Edema"]
seed = 20240
out = "out"
[dataset]
path = "labels.csv"
findings = ["Edema"]
[backend]
kind = "sim"
[backend.sim]
compliance = 0.9
[backend.sim.default_rates]
p_yes_given_positive = 0.8
p_yes_given_negative = 0.6
[referral]
scores = "scores.csv"
direction = "suppress-fp"
threshold = 0.5
"#;

fn criterion_5_referral_cuts_false_positives() -> Vec<String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    write_negatives(dir.path(), 1000);
    let base = RunConfig::from_toml(SIM_CONFIG, &dir.path().join("sim.toml")).unwrap();
    let run = |template| {
        let mut cfg = base.clone();
        cfg.template = template;
        cfg.out = dir.path().join(template.as_str());
        run_eval(&cfg, false).unwrap()
    };
    let pt2 = run(TemplateId::Pt2);
    let pt3 = run(TemplateId::Pt3);
    let mut failures = Vec::new();
    if !pt3.records.iter().all(|r| r.referral_emitted) {
        failures.push("not every PT3 question carried a referral".into());
    }
    let (fp2, fp3) = (pt2.rows[0].counts.fp, pt3.rows[0].counts.fp);
    let ratio = fp3 as f64 / fp2 as f64;
    println!("    FP(PT2) = {fp2}, FP(PT3) = {fp3}, ratio = {ratio:.4}");
    if !(0.05..=0.15).contains(&ratio) {
        failures.push(format!("ratio {ratio:.4} outside [0.05, 0.15]"));
    }
    check_time(&mut failures, start.elapsed(), Duration::from_secs(30));
    failures
}

fn criterion_6_auc_matches_pairwise_statistic() -> Vec<String> {
    let mut failures = Vec::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    let mut with_ties = 0;
    for fixture in 0..100u64 {
        let n = rng.gen_range(2..=400);
        let grid = rng.gen_range(2..30);
        let mut samples = oracle::random_samples(6000 + fixture, n, grid, 0.4);
        samples[0].truth = Truth::Positive;
        samples[1].truth = Truth::Negative;
        let mut scores: Vec<u64> = samples.iter().map(|s| s.score.to_bits()).collect();
        scores.sort_unstable();
        scores.dedup();
        if scores.len() < samples.len() {
            with_ties += 1;
        }
        let got = auc(&samples).unwrap();
        let want = oracle::pairwise_auc(&samples);
        if (got - want).abs() > 1e-12 {
            failures.push(format!("fixture {fixture}: sweep {got}, pairwise {want}"));
        }
    }
    if with_ties < 50 {
        failures.push(format!("only {with_ties} fixtures had tied scores"));
    }
    failures
}

fn sim_records(cfg: &RunConfig, out: &Path, concurrency: usize) -> Vec<u8> {
    let mut cfg = cfg.clone();
    cfg.out = out.to_path_buf();
    cfg.backend.concurrency = concurrency;
    let outcome = run_eval(&cfg, false).unwrap();
    std::fs::read(outcome.records_path).unwrap()
}

fn criterion_7_determinism_and_merge() -> Vec<String> {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();

    let mut chexpert = common::config("chexpert.toml", TemplateId::Pt2, dir.path());
    chexpert.dataset.path = common::fixtures().join("chexpert_test_synthetic.csv");
    chexpert.pathologies = [
        "Atelectasis",
        "Cardiomegaly",
        "Consolidation",
        "Edema",
        "Pleural Effusion",
    ]
    .map(String::from)
    .to_vec();
    chexpert.referral = None;
    let mut replay_pt3 = common::config("chexpert.toml", TemplateId::Pt3, dir.path());
    for cfg in [&mut chexpert, &mut replay_pt3] {
        cfg.backend.kind = BackendKind::Sim;
        cfg.seed = 99;
    }

    for (name, cfg) in [("synthetic PT2", &chexpert), ("replay20 PT3", &replay_pt3)] {
        let k1 = sim_records(cfg, &dir.path().join(format!("{name}-k1")), 1);
        let k8 = sim_records(cfg, &dir.path().join(format!("{name}-k8")), 8);
        let again = sim_records(cfg, &dir.path().join(format!("{name}-k8b")), 8);
        if k1 != k8 || k8 != again {
            failures.push(format!(
                "{name}: record files differ across concurrency levels or executions"
            ));
        }
    }

    let records = medvqa::records::RecordFile::read(&dir.path().join("synthetic PT2-k1/records.jsonl"))
        .unwrap()
        .records;
    let obs: Vec<_> = records.iter().map(|r| (r.verdict.value, r.truth)).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for policy in [UnknownPolicy::AsNegative, UnknownPolicy::AsPositive] {
        let sequential = obs
            .iter()
            .fold(Tally::default(), |t, &(v, tr)| accumulate(t, v, tr, policy));
        for partition in 0..200 {
            let shards = rng.gen_range(1..=16);
            let mut parts = vec![Tally::default(); shards];
            for &(v, tr) in &obs {
                let s = rng.gen_range(0..shards);
                parts[s] = accumulate(parts[s], v, tr, policy);
            }
            let merged = parts.into_iter().fold(Tally::default(), Tally::merge);
            if merged != sequential {
                failures.push(format!("partition {partition} ({shards} shards, {policy:?}) differs"));
            }
        }
    }
    failures
}

fn counts_of(outcome: &RunOutcome, pathology: &str) -> (u64, u64, u64, u64, u64) {
    let row = outcome.rows.iter().find(|r| r.pathology == pathology).unwrap();
    let c = row.counts;
    (c.tp, c.fp, c.fn_, c.tn, row.unknown_count)
}

fn criterion_8_end_to_end_replay() -> Vec<String> {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut expect = |what: String, ok: bool| {
        if !ok {
            failures.push(what);
        }
    };

    // (tp, fp, fn, tn, unknown) for Edema and Cardiomegaly
    let expected = [
        (TemplateId::Pt1, (3, 6, 3, 8, 1), (2, 3, 6, 9, 0)),
        (TemplateId::Pt2, (6, 10, 0, 4, 0), (7, 8, 1, 4, 0)),
        (TemplateId::Pt3, (5, 2, 1, 12, 0), (7, 3, 1, 9, 0)),
    ];
    let mut paths = Vec::new();
    for (template, edema, cardio) in expected {
        let cfg = common::config("chexpert.toml", template, &dir.path().join(template.as_str()));
        let outcome = run_eval(&cfg, false).unwrap();
        let t = template.as_str();
        expect(format!("{t}: 40 records"), outcome.records.len() == 40);
        expect(format!("{t} Edema counts"), counts_of(&outcome, "Edema") == edema);
        expect(
            format!("{t} Cardiomegaly counts"),
            counts_of(&outcome, "Cardiomegaly") == cardio,
        );
        expect(
            format!("{t}: referral only under PT3"),
            outcome.records.iter().any(|r| r.referral_emitted) == (template == TemplateId::Pt3),
        );
        paths.push(outcome.records_path);

        let resumed = run_eval(&cfg, true).unwrap();
        expect(
            format!("{t}: resume made backend calls"),
            resumed.backend_calls == 0 && resumed.resumed == 40,
        );
    }

    let table = run_report(&paths, false).unwrap();
    for line in [
        "Edema         Precision  33.3   37.5  71.4",
        "              F1         40.0   54.5  76.9",
        "Cardiomegaly  Precision  40.0   46.7  70.0",
        "              F1         30.8   60.9  77.8",
    ] {
        expect(
            format!("three-run table lacks {line:?}"),
            table.lines().any(|l| l == line),
        );
    }
    let delta = run_report(&paths[1..], false).unwrap();
    for cells in [
        ["Edema", "10", "2", "-8", "(-80.0%)"],
        ["Cardiomegaly", "8", "3", "-5", "(-62.5%)"],
    ] {
        let found = delta.lines().any(|l| l.split_whitespace().eq(cells.iter().copied()));
        expect(format!("FP delta lacks {cells:?}"), found);
    }

    // (precision, recall, F1) per category
    let pope_expected = [
        (
            TemplateId::Pt1,
            [[100.0, 66.7, 80.0], [66.7, 50.0, 57.1], [100.0, 33.3, 50.0]],
        ),
        (
            TemplateId::Pt3,
            [[66.7, 66.7, 66.7], [80.0, 100.0, 88.9], [100.0, 66.7, 80.0]],
        ),
    ];
    let mut pope_paths = Vec::new();
    for (template, cells) in pope_expected {
        let cfg = common::config(
            "pope.toml",
            template,
            &dir.path().join(format!("pope-{}", template.as_str())),
        );
        let outcome = run_eval(&cfg, false).unwrap();
        let rows = outcome.pope.clone().unwrap_or_default();
        for (category, want) in PopeCategory::ALL.into_iter().zip(cells) {
            let got = rows.iter().find(|r| r.category == category).map(|r| {
                let m = &r.metrics;
                [percent_1dp(m.precision), percent_1dp(m.recall), percent_1dp(m.f1)]
            });
            expect(
                format!("POPE {} {category}: {got:?} vs {want:?}", template.as_str()),
                got == Some(want),
            );
        }
        let resumed = run_eval(&cfg, true).unwrap();
        expect(
            format!("POPE {}: resume made backend calls", template.as_str()),
            resumed.backend_calls == 0,
        );
        pope_paths.push(outcome.records_path);
    }
    let pope = run_report(&pope_paths, true).unwrap();
    expect(
        "POPE table shape".into(),
        pope.lines().next().is_some_and(|l| l.starts_with("Model")),
    );

    failures
}

type Criterion = (u8, &'static str, fn() -> Vec<String>);

fn main() {
    let criteria: [Criterion; 8] = [
        (
            1,
            "published TP/FP/FN counts reproduce the published PT2 precision/recall/F1",
            criterion_1_metric_cross_check,
        ),
        (
            2,
            "calibrated objective and smallest maximizing threshold equal the exhaustive sweep on 200 sets",
            criterion_2_calibration_matches_exhaustive_sweep,
        ),
        (
            3,
            "objective edge cases and weights hold exactly",
            criterion_3_objective_edge_cases,
        ),
        (
            4,
            "PT1/PT2/PT3 prompts for five pathologies match golden files byte for byte",
            criterion_4_prompt_bytes_match_golden_files,
        ),
        (
            5,
            "simulated referral on 1000 negatives scales false positives by about (1 - compliance)",
            criterion_5_referral_cuts_false_positives,
        ),
        (
            6,
            "sweep AUC equals the pairwise statistic on 100 fixtures with ties",
            criterion_6_auc_matches_pairwise_statistic,
        ),
        (
            7,
            "simulator records are byte-identical at K=1 and K=8, and sharded tallies equal sequential ones",
            criterion_7_determinism_and_merge,
        ),
        (
            8,
            "20-image replay runs and reports match hand-verified counts; resume issues no backend calls",
            criterion_8_end_to_end_replay,
        ),
    ];
    let mut failed = 0;
    for (n, what, run) in criteria {
        let failures = std::panic::catch_unwind(run).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            vec![format!("panicked: {msg}")]
        });
        let status = if failures.is_empty() { "PASS" } else { "FAIL" };
        println!("{status} criterion {n}: {what}");
        for f in &failures {
            println!("    {f}");
        }
        failed += usize::from(!failures.is_empty());
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
