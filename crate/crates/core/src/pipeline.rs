//! End-to-end runs: question preparation, the concurrent ask loop with a
//! single ordered writer, resume, aggregation, calibration and re-reporting.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    prompt_digest, BackendError, CachedBackend, HttpBackend, HttpConfig, HttpSummarizer, LexicalSummarizer,
    ReplayBackend, ResponseCache, RetryPolicy, SimBackend, Summarizer, VqaBackend, VqaRequest,
};
use crate::config::{BackendKind, ConfigError, DatasetKind, RunConfig, SummarizerKind};
use crate::dataset::{binarize, parse_label_table, IngestError, TableSchema, UncertainPolicy};
use crate::metrics::{
    fp_delta, pope_report, MetricsRow, PopeCategory, PopeObservation, PopeRow, ReportShapeError, Tally, Truth,
    UnknownPolicy,
};
use crate::normalize::{Normalizer, RuleSet};
use crate::prompt::{render, PromptError, PromptSpec, ReferralClause, TemplateId};
use crate::records::{RecordError, RecordFile, RecordHeader, RecordWriter, VqaRecord};
use crate::referral::{
    auc, calibrate, decide_referral, CalibrationConfig, ReferralError, ReferralPolicy, ScoreFileError, ScoreFileKind,
    ScoreTable, ScoredSample,
};
use crate::report;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.txt";
pub const CACHE_FILE: &str = "cache.jsonl";

/// Largest tolerated fraction of score rows with no matching label row.
pub const DEFAULT_MAX_JOIN_MISS: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("report shape: {0}")]
    Shape(#[from] ReportShapeError),
    #[error("{} request(s) missing from the replay fixture, first: {}", keys.len(), keys.iter().take(5).cloned().collect::<Vec<_>>().join(", "))]
    FixtureMissing { keys: Vec<String> },
    #[error("run halted after {written} of {total} records: {source}; rerun with --resume to continue")]
    Halted {
        written: usize,
        total: usize,
        source: BackendError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Scores(#[from] ScoreFileError),
    #[error(transparent)]
    Referral(#[from] ReferralError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{} of {} score rows for {pathology} have no label row (limit {:.0}%)", misses, rows, limit * 100.0)]
    JoinMiss {
        pathology: String,
        misses: usize,
        rows: usize,
        limit: f64,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Process exit status: 2 for usage errors, 3 for report-shape errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Config(_) | PipelineError::Prompt(_) => 2,
            PipelineError::Records(RecordError::Schema { .. }) => 2,
            PipelineError::Shape(_) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.into(),
        source,
    }
}

/// One question of a run, fully rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub image_id: String,
    pub image_ref: String,
    pub pathology: String,
    pub truth: Truth,
    pub pope_category: Option<PopeCategory>,
    pub weak_score: Option<f64>,
    pub referral: Option<ReferralClause>,
    pub prompt: String,
}

struct Item {
    image_id: String,
    image_ref: String,
    pathology: String,
    truth: Truth,
    pope_category: Option<PopeCategory>,
}

#[derive(Deserialize)]
struct PopeLine {
    image_id: String,
    image_path: String,
    object: String,
    label: String,
    #[serde(default)]
    category: String,
}

fn resolve_image(root: Option<&Path>, image_ref: &str) -> String {
    let is_url = image_ref.starts_with("http://") || image_ref.starts_with("https://");
    match root {
        Some(root) if !is_url && Path::new(image_ref).is_relative() => root.join(image_ref).display().to_string(),
        _ => image_ref.to_string(),
    }
}

fn chexpert_items(config: &RunConfig) -> Result<Vec<Item>, PipelineError> {
    let path = &config.dataset.path;
    let schema = config.dataset.schema();
    let parsed = parse_label_table(File::open(path).map_err(io_err(path))?, &schema)?;
    for e in &parsed.row_errors {
        log::warn!("{}: row {} skipped: {}", path.display(), e.row, e.reason);
    }
    for p in &config.pathologies {
        if !schema.findings.contains(p) && !parsed.extra_findings.contains(p) {
            return Err(PipelineError::Usage(format!(
                "pathology `{p}` is not a finding of {}",
                path.display()
            )));
        }
    }
    let root = config.dataset.image_root.as_deref();
    let mut items = Vec::new();
    for study in &parsed.studies {
        for p in &config.pathologies {
            if let Some(truth) = binarize(study.label(p), config.dataset.policy).truth() {
                items.push(Item {
                    image_id: study.image_id.clone(),
                    image_ref: resolve_image(root, &study.image_ref),
                    pathology: p.clone(),
                    truth,
                    pope_category: None,
                });
            }
        }
    }
    Ok(items)
}

fn parse_yes_no(cell: &str) -> Option<Truth> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "yes" | "1" | "true" => Some(Truth::Positive),
        "no" | "0" | "false" => Some(Truth::Negative),
        _ => None,
    }
}

fn pope_items(config: &RunConfig) -> Result<Vec<Item>, PipelineError> {
    let path = &config.dataset.path;
    let mut reader = csv::Reader::from_reader(File::open(path).map_err(io_err(path))?);
    let root = config.dataset.image_root.as_deref();
    let mut items = Vec::new();
    for (i, line) in reader.deserialize::<PopeLine>().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| PipelineError::Usage(format!("{}: row {row}: {e}", path.display())))?;
        let truth = parse_yes_no(&line.label).ok_or_else(|| {
            PipelineError::Usage(format!(
                "{}: row {row}: label `{}` is not yes/no",
                path.display(),
                line.label
            ))
        })?;
        let pope_category = match line.category.trim() {
            "" => None,
            c => Some(PopeCategory::parse(c).ok_or_else(|| {
                PipelineError::Usage(format!("{}: row {row}: unknown POPE category `{c}`", path.display()))
            })?),
        };
        items.push(Item {
            image_id: line.image_id,
            image_ref: resolve_image(root, &line.image_path),
            pathology: line.object,
            truth,
            pope_category,
        });
    }
    Ok(items)
}

/// Weak-learner thresholds persisted by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub pathology: String,
    pub threshold: f64,
    pub objective: f64,
    pub counts: crate::metrics::ConfusionCounts,
    pub config: CalibrationConfig,
    /// Undefined when the scored samples are single-class.
    pub auc: Option<f64>,
    pub samples: usize,
    /// Score rows whose image id had no label row.
    pub unmatched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub version: u32,
    pub results: Vec<CalibrationReport>,
}

impl CalibrationFile {
    pub fn new(results: Vec<CalibrationReport>) -> Self {
        CalibrationFile { version: 1, results }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(self).expect("calibration serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn threshold_for(&self, pathology: &str) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.pathology == pathology)
            .map(|r| r.threshold)
    }
}

struct ReferralPlan {
    scores: ScoreTable,
    thresholds: HashMap<String, f64>,
    base: ReferralPolicy,
    /// Detections: a missing (image, object) pair means nothing was detected.
    missing_is_zero: bool,
}

impl ReferralPlan {
    fn load(config: &RunConfig, labels: &[&str]) -> Result<Self, PipelineError> {
        let r = config
            .referral
            .as_ref()
            .ok_or_else(|| PipelineError::Usage("PT3 needs a [referral] section".into()))?;
        let scores_path = r
            .scores
            .as_ref()
            .ok_or_else(|| PipelineError::Usage("PT3 needs referral.scores".into()))?;
        let kind = match config.dataset.kind {
            DatasetKind::Chexpert => ScoreFileKind::Scores,
            DatasetKind::Pope => ScoreFileKind::Detections,
        };
        let scores = ScoreTable::load(scores_path, kind)?;
        let calibration = r.calibration.as_deref().map(CalibrationFile::load).transpose()?;
        let mut thresholds = HashMap::new();
        for &label in labels {
            let t = calibration
                .as_ref()
                .and_then(|c| c.threshold_for(label))
                .or(r.threshold)
                .ok_or_else(|| {
                    PipelineError::Usage(format!("no referral threshold for `{label}` in the calibration file"))
                })?;
            thresholds.insert(label.to_string(), t);
        }
        let base = ReferralPolicy {
            direction: r.direction,
            threshold: 0.0,
            stated_percent_negative: r.stated_percent_negative,
            stated_percent_positive: r.stated_percent_positive,
        };
        base.validate()?;
        Ok(ReferralPlan {
            scores,
            thresholds,
            base,
            missing_is_zero: kind == ScoreFileKind::Detections,
        })
    }

    fn decide(&self, image_id: &str, label: &str) -> (Option<f64>, Option<ReferralClause>) {
        let score = self
            .scores
            .get(image_id, label)
            .or_else(|| self.missing_is_zero.then_some(0.0));
        let clause = score.and_then(|s| {
            let policy = ReferralPolicy {
                threshold: self.thresholds[label],
                ..self.base
            };
            decide_referral(&policy, label, s)
        });
        (score, clause)
    }
}

/// Builds every question of a run in dataset order x pathology order.
///
/// Under PT3 a question without a referral clause is asked with the PT2 text.
pub fn prepare_questions(config: &RunConfig) -> Result<Vec<Question>, PipelineError> {
    let items = match config.dataset.kind {
        DatasetKind::Chexpert => chexpert_items(config)?,
        DatasetKind::Pope => pope_items(config)?,
    };
    let template = config.template;
    let registry = config.explanation_registry()?;
    let mut labels: Vec<&str> = Vec::new();
    for item in &items {
        if !labels.contains(&item.pathology.as_str()) {
            labels.push(&item.pathology);
        }
    }
    let mut explanations = HashMap::new();
    if template.needs_explanation() {
        for &label in &labels {
            let e = registry
                .lookup(label)
                .map_err(|e| PipelineError::Usage(format!("{template} needs an explanation: {e}")))?;
            explanations.insert(label.to_string(), e);
        }
    }
    let plan = match template {
        TemplateId::Pt3 => Some(ReferralPlan::load(config, &labels)?),
        _ => None,
    };

    let mut unscored = 0usize;
    let mut questions = Vec::with_capacity(items.len());
    for item in items {
        let (weak_score, referral) = match &plan {
            Some(plan) => plan.decide(&item.image_id, &item.pathology),
            None => (None, None),
        };
        if plan.is_some() && weak_score.is_none() {
            unscored += 1;
        }
        let spec = PromptSpec {
            template: match (&referral, template) {
                (None, TemplateId::Pt3) => TemplateId::Pt2,
                _ => template,
            },
            target: item.pathology.clone(),
            explanation: explanations.get(&item.pathology).cloned(),
            referral: referral.clone(),
        };
        questions.push(Question {
            prompt: render(&spec)?,
            image_id: item.image_id,
            image_ref: item.image_ref,
            pathology: item.pathology,
            truth: item.truth,
            pope_category: item.pope_category,
            weak_score,
            referral,
        });
    }
    if unscored > 0 {
        log::warn!("{unscored} question(s) have no weak-learner score and are asked without a referral");
    }
    Ok(questions)
}

fn load_rules(config: &RunConfig) -> Result<RuleSet, PipelineError> {
    match &config.rules {
        Some(path) => RuleSet::load(path).map_err(|e| PipelineError::Usage(e.to_string())),
        None => Ok(RuleSet::builtin()),
    }
}

fn build_summarizer(config: &RunConfig) -> Option<Arc<dyn Summarizer>> {
    match config.summarizer.kind {
        SummarizerKind::None => None,
        SummarizerKind::Lexical => Some(Arc::new(LexicalSummarizer::default())),
        SummarizerKind::Http => {
            let endpoint = config.summarizer.endpoint.clone().unwrap_or_default();
            let retry = RetryPolicy {
                max_attempts: config.backend.retries,
                base_delay_ms: config.backend.backoff_ms,
            };
            Some(Arc::new(HttpSummarizer::new(
                endpoint,
                retry,
                config.backend.timeout_secs,
            )))
        }
    }
}

/// Digest of everything that determines a run's records; resume refuses a mismatch.
pub fn identity_digest(config: &RunConfig, backend_id: &str, rules: &RuleSet, questions: &[Question]) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(backend_id.as_bytes());
    field(config.template.as_str().as_bytes());
    field(serde_json::to_string(&config.unknown_as).unwrap_or_default().as_bytes());
    field(&config.seed.to_le_bytes());
    field(serde_json::to_string(rules).unwrap_or_default().as_bytes());
    field(
        serde_json::to_string(&config.summarizer.kind)
            .unwrap_or_default()
            .as_bytes(),
    );
    if config.backend.kind == BackendKind::Sim {
        field(
            serde_json::to_string(&config.backend.sim)
                .unwrap_or_default()
                .as_bytes(),
        );
    }
    for q in questions {
        field(q.image_id.as_bytes());
        field(q.pathology.as_bytes());
        field(prompt_digest(&q.prompt).as_bytes());
        field(if q.truth.is_positive() { b"+" } else { b"-" });
    }
    hex::encode(h.finalize())
}

fn cache_path(config: &RunConfig) -> PathBuf {
    config
        .backend
        .cache
        .clone()
        .unwrap_or_else(|| config.out.join(CACHE_FILE))
}

fn request_of(q: &Question) -> VqaRequest {
    VqaRequest {
        image_id: q.image_id.clone(),
        image_ref: q.image_ref.clone(),
        prompt: q.prompt.clone(),
    }
}

/// Builds the configured backend. For replay, every request must be either in
/// the fixture or already cached.
fn build_backend(
    config: &RunConfig,
    questions: &[Question],
    cache: &ResponseCache,
) -> Result<Box<dyn VqaBackend>, PipelineError> {
    let b = &config.backend;
    Ok(match b.kind {
        BackendKind::Sim => {
            let mut params = b.sim.clone();
            params.seed = config.seed;
            let truth = questions
                .iter()
                .map(|q| ((q.image_id.clone(), q.pathology.clone()), q.truth))
                .collect();
            Box::new(SimBackend::new(params, truth))
        }
        BackendKind::Replay => {
            let fixture = b
                .fixture
                .as_ref()
                .ok_or_else(|| PipelineError::Usage("replay needs backend.fixture".into()))?;
            let replay = ReplayBackend::load(fixture)?;
            let missing: Vec<String> = questions
                .iter()
                .map(request_of)
                .filter(|r| !replay.contains(r) && cache.get(replay.id(), r).is_none())
                .map(|r| format!("{} ({})", r.key(), r.image_id))
                .collect();
            if !missing.is_empty() {
                return Err(PipelineError::FixtureMissing { keys: missing });
            }
            Box::new(replay)
        }
        BackendKind::Http => Box::new(HttpBackend::new(HttpConfig {
            endpoint: b.endpoint.clone().unwrap_or_default(),
            retry: RetryPolicy {
                max_attempts: b.retries,
                base_delay_ms: b.backoff_ms,
            },
            timeout_secs: b.timeout_secs,
            image_mode: b.image_mode,
            generation: b.generation.clone(),
        })),
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records_path: PathBuf,
    pub records: Vec<VqaRecord>,
    pub rows: Vec<MetricsRow>,
    pub pope: Option<Vec<PopeRow>>,
    /// Requests that reached the backend (cache misses).
    pub backend_calls: u64,
    pub cache_hits: u64,
    /// Records carried over from an earlier, interrupted run.
    pub resumed: usize,
    pub report: String,
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    label: &'a str,
    template: TemplateId,
    backend_id: &'a str,
    unknown_as: UnknownPolicy,
    rows: &'a [MetricsRow],
    pope: Option<&'a [PopeRow]>,
}

/// Runs an evaluation with the backend named in the config.
pub fn run_eval(config: &RunConfig, resume: bool) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let questions = prepare_questions(config)?;
    std::fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;
    let path = cache_path(config);
    let cache = ResponseCache::open(&path).map_err(io_err(&path))?;
    let backend = build_backend(config, &questions, &cache)?;
    execute(config, questions, backend, cache, resume)
}

/// Runs an evaluation against a caller-supplied backend (still cached).
pub fn run_eval_with<B: VqaBackend + 'static>(
    config: &RunConfig,
    resume: bool,
    backend: B,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let questions = prepare_questions(config)?;
    std::fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;
    let path = cache_path(config);
    let cache = ResponseCache::open(&path).map_err(io_err(&path))?;
    execute(config, questions, Box::new(backend), cache, resume)
}

fn execute(
    config: &RunConfig,
    questions: Vec<Question>,
    backend: Box<dyn VqaBackend>,
    cache: ResponseCache,
    resume: bool,
) -> Result<RunOutcome, PipelineError> {
    let rules = load_rules(config)?;
    let backend_id = backend.id().to_string();
    let identity = identity_digest(config, &backend_id, &rules, &questions);
    let header = RecordHeader::new(config.label(), config.template, backend_id, config.unknown_as, identity);
    let records_path = config.out.join(RECORDS_FILE);

    let (mut records, mut writer) = if resume && records_path.exists() {
        let done = check_resumable(&records_path, &header, &questions)?;
        log::info!("resuming after {} of {} records", done.len(), questions.len());
        (done, RecordWriter::append(&records_path)?)
    } else {
        (Vec::new(), RecordWriter::create(&records_path, &header)?)
    };
    let resumed = records.len();

    let cached = CachedBackend::new(backend, cache);
    let normalizer = Normalizer::new(rules, build_summarizer(config));
    let ctx = AskContext {
        backend: &cached,
        normalizer: &normalizer,
        template: config.template,
        timestamps: config.record_timestamps(),
    };
    let outcome = ask_all(&ctx, &questions[resumed..], config.backend.concurrency, |r| {
        writer.write(r)
    });
    match outcome {
        Ok(new) => records.extend(new),
        Err(AskFailure::Backend { written, source }) => {
            return Err(PipelineError::Halted {
                written: resumed + written,
                total: questions.len(),
                source,
            })
        }
        Err(AskFailure::Sink(e)) => return Err(e.into()),
    }
    drop(writer);

    let rows = metrics_rows(&records, config.unknown_as);
    let pope = pope_rows(&records, config.unknown_as)?;
    let label = config.label();
    let report = render_run(&label, &rows, pope.as_deref());
    let doc = MetricsDocument {
        label: &label,
        template: config.template,
        backend_id: &header.backend_id,
        unknown_as: config.unknown_as,
        rows: &rows,
        pope: pope.as_deref(),
    };
    let metrics_path = config.out.join(METRICS_FILE);
    let mut json = serde_json::to_string_pretty(&doc).expect("metrics serialize");
    json.push('\n');
    std::fs::write(&metrics_path, json).map_err(io_err(&metrics_path))?;
    let report_path = config.out.join(REPORT_FILE);
    std::fs::write(&report_path, &report).map_err(io_err(&report_path))?;

    Ok(RunOutcome {
        records_path,
        records,
        rows,
        pope,
        backend_calls: cached.backend_calls(),
        cache_hits: cached.cache_hits(),
        resumed,
        report,
    })
}

/// Validates an existing record file against this run and returns its
/// records. A torn final line is cut off by rewriting the file.
fn check_resumable(
    path: &Path,
    header: &RecordHeader,
    questions: &[Question],
) -> Result<Vec<VqaRecord>, PipelineError> {
    let file = RecordFile::read(path)?;
    if file.header != *header {
        return Err(PipelineError::Usage(format!(
            "{} was written by a different configuration; rerun without --resume",
            path.display()
        )));
    }
    if file.records.len() > questions.len() {
        return Err(PipelineError::Usage(format!(
            "{} has more records than questions",
            path.display()
        )));
    }
    for (i, (r, q)) in file.records.iter().zip(questions).enumerate() {
        if r.image_id != q.image_id || r.pathology != q.pathology || r.prompt_digest != prompt_digest(&q.prompt) {
            return Err(PipelineError::Usage(format!(
                "{}: record {} does not match question ({}, {})",
                path.display(),
                i + 1,
                q.image_id,
                q.pathology
            )));
        }
    }
    if file.truncated_tail {
        let mut w = RecordWriter::create(path, header)?;
        for r in &file.records {
            w.write(r)?;
        }
    }
    Ok(file.records)
}

struct AskContext<'a> {
    backend: &'a dyn VqaBackend,
    normalizer: &'a Normalizer,
    template: TemplateId,
    timestamps: bool,
}

enum AskFailure {
    Backend { written: usize, source: BackendError },
    Sink(RecordError),
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn answer(ctx: &AskContext<'_>, q: &Question) -> Result<VqaRecord, BackendError> {
    let request = request_of(q);
    let started_at = ctx.timestamps.then(now);
    let response = ctx.backend.ask(&request)?;
    let finished_at = ctx.timestamps.then(now);
    let verdict = ctx.normalizer.normalize(&request.prompt, &response.text, &q.pathology);
    Ok(VqaRecord {
        image_id: q.image_id.clone(),
        pathology: q.pathology.clone(),
        template: ctx.template,
        prompt_digest: request.prompt_digest(),
        raw_answer: response.text,
        verdict,
        truth: q.truth,
        referral_emitted: q.referral.is_some(),
        weak_score: q.weak_score,
        pope_category: q.pope_category,
        started_at,
        finished_at,
    })
}

/// Asks every question with up to `concurrency` requests in flight. Results
/// are handed to `sink` strictly in question order; the first backend error
/// stops the loop after everything before it has been written.
fn ask_all(
    ctx: &AskContext<'_>,
    questions: &[Question],
    concurrency: usize,
    mut sink: impl FnMut(&VqaRecord) -> Result<(), RecordError>,
) -> Result<Vec<VqaRecord>, AskFailure> {
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = concurrency.max(1).min(questions.len());
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Result<VqaRecord, BackendError>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop) = (&next, &stop);
            scope.spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(q) = questions.get(i) else { break };
                    let result = answer(ctx, q);
                    if result.is_err() {
                        stop.store(true, Ordering::SeqCst);
                    }
                    if tx.send((i, result)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut written = Vec::with_capacity(questions.len());
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&written.len()) {
                let failure = match result {
                    Ok(record) => match sink(&record) {
                        Ok(()) => {
                            written.push(record);
                            continue;
                        }
                        Err(e) => AskFailure::Sink(e),
                    },
                    Err(source) => AskFailure::Backend {
                        written: written.len(),
                        source,
                    },
                };
                stop.store(true, Ordering::SeqCst);
                return Err(failure);
            }
        }
        Ok(written)
    })
}

/// Per-pathology tallies in first-seen order.
pub fn tallies(records: &[VqaRecord], policy: UnknownPolicy) -> Vec<(String, Tally)> {
    let mut out: Vec<(String, Tally)> = Vec::new();
    for r in records {
        let slot = match out.iter().position(|(p, _)| *p == r.pathology) {
            Some(i) => i,
            None => {
                out.push((r.pathology.clone(), Tally::default()));
                out.len() - 1
            }
        };
        out[slot].1.accumulate(r.verdict.value, r.truth, policy);
    }
    out
}

pub fn metrics_rows(records: &[VqaRecord], policy: UnknownPolicy) -> Vec<MetricsRow> {
    tallies(records, policy)
        .into_iter()
        .map(|(p, t)| MetricsRow::from_tally(p, t))
        .collect()
}

/// POPE rows when any record carries a category.
pub fn pope_rows(records: &[VqaRecord], policy: UnknownPolicy) -> Result<Option<Vec<PopeRow>>, ReportShapeError> {
    if records.iter().all(|r| r.pope_category.is_none()) {
        return Ok(None);
    }
    let obs: Vec<PopeObservation> = records
        .iter()
        .map(|r| PopeObservation {
            category: r.pope_category,
            verdict: r.verdict.value,
            truth: r.truth,
        })
        .collect();
    pope_report(&obs, policy).map(Some)
}

fn render_run(label: &str, rows: &[MetricsRow], pope: Option<&[PopeRow]>) -> String {
    let mut out = String::new();
    match pope {
        Some(pope) => out.push_str(&report::pope_table(&[(label.to_string(), pope.to_vec())])),
        None => out.push_str(&report::metrics_table(&[(label.to_string(), rows.to_vec())])),
    }
    out.push('\n');
    out.push_str(&report::counts_table(rows));
    out
}

/// Renders reports from finished record files. With two files the second is
/// compared against the first for false positives. `pope` requires every
/// record to carry a category.
pub fn run_report(paths: &[PathBuf], pope: bool) -> Result<String, PipelineError> {
    if paths.is_empty() {
        return Err(PipelineError::Usage("report needs at least one record file".into()));
    }
    let files = paths
        .iter()
        .map(|p| RecordFile::read(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::new();

    let mut pope_runs = Vec::new();
    for f in &files {
        let rows = if pope {
            let obs: Vec<PopeObservation> = f
                .records
                .iter()
                .map(|r| PopeObservation {
                    category: r.pope_category,
                    verdict: r.verdict.value,
                    truth: r.truth,
                })
                .collect();
            Some(pope_report(&obs, f.header.unknown_as)?)
        } else {
            pope_rows(&f.records, f.header.unknown_as)?
        };
        if let Some(rows) = rows {
            pope_runs.push((f.header.label.clone(), rows));
        }
    }

    let runs: Vec<(String, Vec<MetricsRow>)> = files
        .iter()
        .map(|f| (f.header.label.clone(), metrics_rows(&f.records, f.header.unknown_as)))
        .collect();
    if !pope {
        out.push_str(&report::metrics_table(&runs));
    }
    if !pope_runs.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&report::pope_table(&pope_runs));
    }
    if files.len() == 2 {
        let counts = |rows: &[MetricsRow]| rows.iter().map(|r| (r.pathology.clone(), r.counts)).collect::<Vec<_>>();
        let delta = fp_delta(&counts(&runs[0].1), &counts(&runs[1].1))?;
        out.push('\n');
        out.push_str(&report::fp_delta_table(&runs[0].0, &runs[1].0, &delta));
    }
    for (label, rows) in &runs {
        out.push('\n');
        out.push_str(&format!("{label}\n"));
        out.push_str(&report::counts_table(rows));
    }
    Ok(out)
}

/// Inputs of a calibration run.
#[derive(Debug, Clone)]
pub struct CalibrateRequest {
    pub scores: PathBuf,
    pub labels: PathBuf,
    pub schema: TableSchema,
    pub policy: UncertainPolicy,
    /// Pathologies to calibrate; every label of the score file when empty.
    pub pathologies: Vec<String>,
    pub config: CalibrationConfig,
    pub max_join_miss: f64,
}

impl CalibrateRequest {
    pub fn new(scores: PathBuf, labels: PathBuf) -> Self {
        CalibrateRequest {
            scores,
            labels,
            schema: TableSchema::default(),
            policy: UncertainPolicy::default(),
            pathologies: Vec::new(),
            config: CalibrationConfig::default(),
            max_join_miss: DEFAULT_MAX_JOIN_MISS,
        }
    }
}

/// Joins weak-learner scores with binarized labels and tunes one threshold
/// per pathology.
pub fn run_calibrate(req: &CalibrateRequest) -> Result<Vec<CalibrationReport>, PipelineError> {
    req.config.validate()?;
    let scores = ScoreTable::load(&req.scores, ScoreFileKind::Scores)?;
    let parsed = parse_label_table(File::open(&req.labels).map_err(io_err(&req.labels))?, &req.schema)?;
    for e in &parsed.row_errors {
        log::warn!("{}: row {} skipped: {}", req.labels.display(), e.row, e.reason);
    }
    let by_id: HashMap<&str, &crate::dataset::Study> =
        parsed.studies.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let pathologies: Vec<String> = if req.pathologies.is_empty() {
        scores.labels().into_iter().map(String::from).collect()
    } else {
        req.pathologies.clone()
    };

    let mut reports = Vec::new();
    for pathology in &pathologies {
        let mut samples = Vec::new();
        let mut rows = 0usize;
        let mut misses = 0usize;
        for (image_id, score) in scores.rows_for(pathology) {
            rows += 1;
            match by_id.get(image_id) {
                None => misses += 1,
                Some(study) => {
                    if let Some(truth) = binarize(study.label(pathology), req.policy).truth() {
                        samples.push(ScoredSample::new(image_id, score, truth));
                    }
                }
            }
        }
        if rows == 0 {
            return Err(PipelineError::Usage(format!(
                "{} has no scores for `{pathology}`",
                req.scores.display()
            )));
        }
        if misses as f64 > req.max_join_miss * rows as f64 {
            return Err(PipelineError::JoinMiss {
                pathology: pathology.clone(),
                misses,
                rows,
                limit: req.max_join_miss,
            });
        }
        if misses > 0 {
            log::warn!("{pathology}: {misses} of {rows} score rows have no label row");
        }
        let result = calibrate(&samples, &req.config)?;
        reports.push(CalibrationReport {
            pathology: pathology.clone(),
            threshold: result.threshold,
            objective: result.objective,
            counts: result.counts,
            config: req.config,
            auc: auc(&samples).ok(),
            samples: samples.len(),
            unmatched: misses,
        });
    }
    Ok(reports)
}
