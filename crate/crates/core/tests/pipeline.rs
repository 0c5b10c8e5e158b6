mod common;

use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::oracle;
use medvqa::backend::{BackendError, ReplayBackend, VqaBackend, VqaRequest, VqaResponse};
use medvqa::config::{BackendKind, RunConfig};
use medvqa::metrics::Truth;
use medvqa::pipeline::{run_calibrate, run_eval, run_eval_with, run_report, CalibrateRequest, PipelineError};
use medvqa::prompt::TemplateId;
use medvqa::records::RecordFile;

fn replay() -> ReplayBackend {
    ReplayBackend::load(&common::replay20().join("fixture.jsonl")).unwrap()
}

/// Counts calls and fails every call after the first `ok` ones.
struct Flaky {
    inner: ReplayBackend,
    ok: usize,
    calls: Arc<AtomicUsize>,
}

impl VqaBackend for Flaky {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn ask(&self, request: &VqaRequest) -> Result<VqaResponse, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.ok {
            return Err(BackendError::Unavailable {
                attempts: 3,
                last_error: "status 500".into(),
            });
        }
        self.inner.ask(request)
    }
}

fn flaky(ok: usize) -> (Flaky, Arc<AtomicUsize>) {
    let calls = Arc::new(AtomicUsize::new(0));
    (
        Flaky {
            inner: replay(),
            ok,
            calls: calls.clone(),
        },
        calls,
    )
}

#[test]
fn four_image_pt1_run() {
    let dir = tempfile::tempdir().unwrap();
    let labels: String = std::fs::read_to_string(common::replay20().join("labels.csv"))
        .unwrap()
        .lines()
        .take(5)
        .map(|l| format!("{l}\n"))
        .collect();
    let labels_path = dir.path().join("labels.csv");
    std::fs::write(&labels_path, labels).unwrap();

    let mut cfg = common::config("chexpert.toml", TemplateId::Pt1, &dir.path().join("out"));
    cfg.dataset.path = labels_path;
    cfg.pathologies = vec!["Edema".into()];
    let outcome = run_eval(&cfg, false).unwrap();
    assert_eq!(outcome.records.len(), 4);
    assert_eq!(outcome.rows.len(), 1);
    assert_eq!(outcome.backend_calls, 4);
    // img01-03 answered yes, img04 no; all four are Edema positives
    let c = outcome.rows[0].counts;
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 0, 1, 0));

    let again = run_eval(&cfg, false).unwrap();
    assert_eq!(again.backend_calls, 0);
    assert_eq!(again.cache_hits, 4);
    assert_eq!(again.records, outcome.records);
}

#[test]
fn halted_run_resumes_without_repeating_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = |name: &str| {
        let mut c = common::config("chexpert.toml", TemplateId::Pt2, &dir.path().join(name));
        c.backend.concurrency = 1;
        c
    };
    let reference = run_eval(&cfg("reference"), false).unwrap();

    let interrupted = cfg("interrupted");
    let (backend, calls) = flaky(15);
    let err = run_eval_with(&interrupted, false, backend).unwrap_err();
    match &err {
        PipelineError::Halted { written, total, .. } => assert_eq!((*written, *total), (15, 40)),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("--resume"));
    assert_eq!(calls.load(Ordering::SeqCst), 16);
    assert_eq!(
        RecordFile::read(&interrupted.out.join("records.jsonl"))
            .unwrap()
            .records
            .len(),
        15
    );

    let (backend, calls) = flaky(usize::MAX);
    let resumed = run_eval_with(&interrupted, true, backend).unwrap();
    assert_eq!(resumed.resumed, 15);
    assert_eq!(calls.load(Ordering::SeqCst), 25);
    assert_eq!(resumed.records, reference.records);
    assert_eq!(
        std::fs::read(&resumed.records_path).unwrap(),
        std::fs::read(&reference.records_path).unwrap()
    );
}

#[test]
fn halting_with_many_workers_keeps_a_clean_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config("chexpert.toml", TemplateId::Pt1, dir.path());
    cfg.backend.concurrency = 8;
    let (backend, _) = flaky(10);
    let err = run_eval_with(&cfg, false, backend).unwrap_err();
    let PipelineError::Halted { written, .. } = err else {
        panic!("{err:?}")
    };
    let file = RecordFile::read(&dir.path().join("records.jsonl")).unwrap();
    assert_eq!(file.records.len(), written);
    assert!(written <= 10);

    let (backend, calls) = flaky(usize::MAX);
    let outcome = run_eval_with(&cfg, true, backend).unwrap();
    assert_eq!(outcome.records.len(), 40);
    // answers obtained before the failure were cached
    assert_eq!(calls.load(Ordering::SeqCst), 30);
}

#[test]
fn torn_record_tail_is_repaired_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config("chexpert.toml", TemplateId::Pt3, dir.path());
    let full = run_eval(&cfg, false).unwrap();
    let bytes = std::fs::read(&full.records_path).unwrap();
    std::fs::write(&full.records_path, &bytes[..bytes.len() - 40]).unwrap();

    let resumed = run_eval(&cfg, true).unwrap();
    assert_eq!(resumed.resumed, 39);
    assert_eq!(resumed.backend_calls, 0);
    assert_eq!(std::fs::read(&full.records_path).unwrap(), bytes);
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config("chexpert.toml", TemplateId::Pt1, dir.path());
    run_eval(&cfg, false).unwrap();
    let mut other = cfg.clone();
    other.template = TemplateId::Pt2;
    let err = run_eval(&other, true).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn replay_preflight_lists_missing_keys() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config("chexpert.toml", TemplateId::Pt1, dir.path());
    cfg.pathologies.push("Atelectasis".into());
    let err = run_eval(&cfg, false).unwrap_err();
    match err {
        PipelineError::FixtureMissing { keys } => assert_eq!(keys.len(), 20),
        other => panic!("unexpected {other:?}"),
    }
    assert!(!dir.path().join("records.jsonl").exists());
}

#[test]
fn invalid_config_fails_before_any_request() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config("chexpert.toml", TemplateId::Pt3, dir.path());
    cfg.referral = None;
    let (backend, calls) = flaky(usize::MAX);
    let err = run_eval_with(&cfg, false, backend).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(calls.load(Ordering::SeqCst), 0);

    let mut cfg = common::config("chexpert.toml", TemplateId::Pt2, dir.path());
    cfg.pathologies = vec!["Fibrosis".into()];
    assert_eq!(run_eval(&cfg, false).unwrap_err().exit_code(), 2);
}

#[test]
fn referrals_are_auditable_against_weak_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config("chexpert.toml", TemplateId::Pt3, dir.path());
    let outcome = run_eval(&cfg, false).unwrap();
    let referred: Vec<_> = outcome.records.iter().filter(|r| r.referral_emitted).collect();
    // Edema: img06-img16; Cardiomegaly: img05-img10 and img18
    assert_eq!(referred.len(), 18);
    for r in &outcome.records {
        let score = r.weak_score.unwrap();
        assert_eq!(r.referral_emitted, score < 0.5, "{}", r.image_id);
        assert_eq!(r.template, TemplateId::Pt3);
    }
}

#[test]
fn pt3_runs_on_the_simulator_cut_false_positives() {
    let dir = tempfile::tempdir().unwrap();
    let n = 1000;
    let mut labels = String::from("Path,Edema\n");
    let mut scores = String::from("image_id,pathology,score\n");
    for i in 0..n {
        labels.push_str(&format!("img{i:04}.jpg,0.0\n"));
        scores.push_str(&format!("img{i:04}.jpg,Edema,0.1\n"));
    }
    std::fs::write(dir.path().join("labels.csv"), labels).unwrap();
    std::fs::write(dir.path().join("scores.csv"), scores).unwrap();
    let text = r#"
template = "pt2"
pathologies = ["Edema"]
out = "out"
seed = 7
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
threshold = 0.5
"#;
    let cfg = RunConfig::from_toml(text, &dir.path().join("run.toml")).unwrap();
    let mut pt2 = cfg.clone();
    pt2.out = dir.path().join("pt2");
    let mut pt3 = cfg;
    pt3.template = TemplateId::Pt3;
    pt3.out = dir.path().join("pt3");
    let fp2 = run_eval(&pt2, false).unwrap().rows[0].counts.fp;
    let fp3 = run_eval(&pt3, false).unwrap().rows[0].counts.fp;
    assert!(fp3 < fp2, "{fp3} vs {fp2}");
}

fn fixture_runs(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut paths = Vec::new();
    for (name, template) in [
        ("chexpert.toml", TemplateId::Pt2),
        ("chexpert.toml", TemplateId::Pt3),
        ("pope.toml", TemplateId::Pt1),
    ] {
        let out = dir.join(format!("{}-{}", name.trim_end_matches(".toml"), template.as_str()));
        paths.push(
            run_eval(&common::config(name, template, &out), false)
                .unwrap()
                .records_path,
        );
    }
    paths
}

#[test]
fn report_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let runs = fixture_runs(dir.path());

    let single = run_report(&runs[..1], false).unwrap();
    assert!(single.starts_with("Pathology     Metric"), "{single}");
    assert!(!single.contains("Change"));

    let pair = run_report(&runs[..2], false).unwrap();
    let delta = pair
        .lines()
        .find(|l| l.starts_with("Edema") && l.contains("(-"))
        .unwrap();
    assert_eq!(
        delta.split_whitespace().collect::<Vec<_>>(),
        ["Edema", "10", "2", "-8", "(-80.0%)"]
    );

    let pope = run_report(&runs[2..], true).unwrap();
    assert!(pope.lines().next().unwrap().starts_with("Model  Adversarial Precision"));

    // re-reporting is pure
    assert_eq!(run_report(&runs[..2], false).unwrap(), pair);

    let shape = run_report(&[runs[0].clone(), runs[2].clone()], false).unwrap_err();
    assert_eq!(shape.exit_code(), 3, "{shape}");
    let untagged = run_report(&runs[..1], true).unwrap_err();
    assert_eq!(untagged.exit_code(), 3);

    let foreign = dir.path().join("foreign.jsonl");
    let text = std::fs::read_to_string(&runs[0])
        .unwrap()
        .replacen("\"version\":1", "\"version\":2", 1);
    std::fs::write(&foreign, text).unwrap();
    assert_eq!(
        run_report(&[runs[0].clone(), foreign], false).unwrap_err().exit_code(),
        2
    );
}

#[test]
fn calibration_matches_the_sweep_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let samples = oracle::random_samples(11, 100, 40, 0.3);
    let mut labels = String::from("Path,Edema\n");
    let mut scores = String::from("image_id,pathology,score\n");
    for s in &samples {
        let cell = if s.truth == Truth::Positive { "1.0" } else { "0.0" };
        labels.push_str(&format!("{}.jpg,{cell}\n", s.image_id));
        scores.push_str(&format!("{}.jpg,Edema,{}\n", s.image_id, s.score));
    }
    std::fs::write(dir.path().join("labels.csv"), labels).unwrap();
    std::fs::write(dir.path().join("scores.csv"), &scores).unwrap();
    let req = CalibrateRequest::new(dir.path().join("scores.csv"), dir.path().join("labels.csv"));
    let reports = run_calibrate(&req).unwrap();
    assert_eq!(reports.len(), 1);
    let (value, threshold) = oracle::sweep(&samples, 0.2, 0.8);
    assert_eq!((reports[0].objective, reports[0].threshold), (value, threshold));
    assert_eq!(reports[0].auc, Some(oracle::pairwise_auc(&samples)));
    assert_eq!(reports[0].samples, 100);

    // 10 of 110 score rows with no label row exceeds the 5% limit
    let mut extra = scores.clone();
    for i in 0..10 {
        extra.push_str(&format!("ghost{i}.jpg,Edema,0.5\n"));
    }
    std::fs::write(dir.path().join("scores.csv"), extra).unwrap();
    assert!(matches!(
        run_calibrate(&req),
        Err(PipelineError::JoinMiss { misses: 10, .. })
    ));

    // all-positive labels leave calibration undefined
    let all_pos = "Path,Edema\n".to_string()
        + &samples
            .iter()
            .map(|s| format!("{}.jpg,1.0\n", s.image_id))
            .collect::<String>();
    std::fs::write(dir.path().join("labels.csv"), all_pos).unwrap();
    std::fs::write(dir.path().join("scores.csv"), scores).unwrap();
    assert!(matches!(run_calibrate(&req), Err(PipelineError::Referral(_))));
}

#[test]
fn separable_scores_calibrate_to_a_perfect_objective() {
    let dir = tempfile::tempdir().unwrap();
    let mut labels = String::from("Path,Cardiomegaly\n");
    let mut scores = String::from("image_id,pathology,score\n");
    for i in 0..20 {
        let positive = i % 2 == 0;
        labels.push_str(&format!("a{i}.jpg,{}\n", if positive { 1 } else { 0 }));
        let score = if positive {
            0.6 + i as f64 / 100.0
        } else {
            0.1 + i as f64 / 100.0
        };
        scores.push_str(&format!("a{i}.jpg,Cardiomegaly,{score}\n"));
    }
    std::fs::write(dir.path().join("labels.csv"), labels).unwrap();
    std::fs::write(dir.path().join("scores.csv"), scores).unwrap();
    let req = CalibrateRequest::new(dir.path().join("scores.csv"), dir.path().join("labels.csv"));
    let r = &run_calibrate(&req).unwrap()[0];
    assert_eq!(r.objective, 1.0);
    assert!(r.threshold > 0.29 && r.threshold <= 0.6, "{}", r.threshold);
    assert_eq!(r.auc, Some(1.0));
}

fn medvqa(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_medvqa")).args(args).output().unwrap()
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let fx = common::replay20();
    let config = fx.join("chexpert.toml");
    let out = |t: &str| dir.path().join(t).display().to_string();
    for t in ["pt2", "pt3"] {
        let o = medvqa(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--template",
            t,
            "--out",
            &out(t),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = medvqa(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--template",
        "pt3",
        "--out",
        &out("pt3"),
        "--resume",
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("0 backend call(s)"));

    let r2 = format!("{}/records.jsonl", out("pt2"));
    let r3 = format!("{}/records.jsonl", out("pt3"));
    let o = medvqa(&["report", &r2, &r3]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Cardiomegaly    8    3  -5 (-62.5%)"), "{text}");

    let o = medvqa(&["run", "--config", config.to_str().unwrap(), "--template", "pt9"]);
    assert_eq!(o.status.code(), Some(2));
    let o = medvqa(&["run", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = medvqa(&["pope", &r2]);
    assert_eq!(o.status.code(), Some(3));

    let o = medvqa(&["ingest", fx.join("labels.csv").to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let edema = text.lines().find(|l| l.starts_with("Edema")).unwrap();
    assert_eq!(edema.split_whitespace().collect::<Vec<_>>()[1..3], ["6", "14"]);

    let calib = dir.path().join("calibration.json");
    let o = medvqa(&[
        "calibrate",
        "--scores",
        fx.join("scores.csv").to_str().unwrap(),
        "--labels",
        fx.join("labels.csv").to_str().unwrap(),
        "--out",
        calib.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&calib).unwrap()).unwrap();
    assert_eq!(file["results"].as_array().unwrap().len(), 2);
}

#[test]
fn sim_backend_kind_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config("chexpert.toml", TemplateId::Pt1, dir.path());
    cfg.backend.kind = BackendKind::Sim;
    let a = run_eval(&cfg, false).unwrap();
    assert_eq!(a.records.len(), 40);
    assert!(a.records.iter().all(|r| r.started_at.is_none()));
}
