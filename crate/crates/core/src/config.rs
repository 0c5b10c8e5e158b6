//! Run configuration: one TOML document, with command-line overrides applied
//! on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ImageMode, SimulatorParams};
use crate::dataset::{TableSchema, UncertainPolicy, DEFAULT_METADATA_COLUMNS};
use crate::metrics::UnknownPolicy;
use crate::prompt::{ExplanationRegistry, TemplateId};
use crate::referral::ReferralDirection;

/// The five pathologies evaluated by default.
pub const DEFAULT_PATHOLOGIES: [&str; 5] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Pleural Effusion",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// CheXpert-style label table; one question per (image, pathology).
    #[default]
    Chexpert,
    /// POPE question table `image_id,image_path,object,label,category`.
    Pope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(default)]
    pub kind: DatasetKind,
    pub path: PathBuf,
    #[serde(default = "default_path_column")]
    pub path_column: String,
    #[serde(default)]
    pub id_column: Option<String>,
    /// Schema finding list; defaults to the 13 CheXpert findings.
    #[serde(default)]
    pub findings: Option<Vec<String>>,
    /// Prefix joined onto relative image paths.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    #[serde(default, flatten)]
    pub policy: UncertainPolicy,
}

fn default_path_column() -> String {
    "Path".to_string()
}

impl DatasetConfig {
    pub fn schema(&self) -> TableSchema {
        let mut schema = TableSchema {
            path_column: self.path_column.clone(),
            id_column: self.id_column.clone(),
            metadata_columns: DEFAULT_METADATA_COLUMNS.iter().map(|s| s.to_string()).collect(),
            ..TableSchema::default()
        };
        if let Some(f) = &self.findings {
            schema.findings = f.clone();
        }
        schema
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Replay fixture (JSON lines).
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    /// Total attempts per request for the HTTP backend.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Maximum in-flight requests.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub image_mode: ImageMode,
    /// Opaque generation settings forwarded to the HTTP backend.
    #[serde(default)]
    pub generation: Option<serde_json::Value>,
    #[serde(default)]
    pub sim: SimulatorParams,
    /// Response cache file; defaults to `<out>/cache.jsonl`.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_concurrency() -> usize {
    8
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            endpoint: None,
            fixture: None,
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_secs: default_timeout_secs(),
            concurrency: default_concurrency(),
            image_mode: ImageMode::default(),
            generation: None,
            sim: SimulatorParams::default(),
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummarizerKind {
    #[default]
    None,
    Lexical,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizerConfig {
    #[serde(default)]
    pub kind: SummarizerKind,
    #[serde(default)]
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferralConfig {
    /// Weak-learner scores (`image_id,pathology,score`) or, for POPE,
    /// detections (`image_id,object_label,confidence`).
    #[serde(default)]
    pub scores: Option<PathBuf>,
    #[serde(default = "default_direction")]
    pub direction: ReferralDirection,
    /// Fixed threshold for every pathology.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Calibration file written by `calibrate`; per-pathology thresholds.
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    #[serde(default = "default_percent_negative")]
    pub stated_percent_negative: u8,
    #[serde(default = "default_percent_positive")]
    pub stated_percent_positive: u8,
}

fn default_direction() -> ReferralDirection {
    ReferralDirection::SuppressFp
}
fn default_percent_negative() -> u8 {
    10
}
fn default_percent_positive() -> u8 {
    90
}

impl Default for ReferralConfig {
    fn default() -> Self {
        ReferralConfig {
            scores: None,
            direction: default_direction(),
            threshold: None,
            calibration: None,
            stated_percent_negative: default_percent_negative(),
            stated_percent_positive: default_percent_positive(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Pathologies asked about, in question order (CheXpert datasets only).
    #[serde(default = "default_pathologies")]
    pub pathologies: Vec<String>,
    pub template: TemplateId,
    /// Explanation registry; the shipped registry when absent.
    #[serde(default)]
    pub explanations: Option<PathBuf>,
    /// Normalizer rule file; the shipped rules when absent.
    #[serde(default)]
    pub rules: Option<PathBuf>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub summarizer: SummarizerConfig,
    #[serde(default)]
    pub referral: Option<ReferralConfig>,
    #[serde(default)]
    pub unknown_as: UnknownPolicy,
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Run name shown in reports; defaults to the template name.
    #[serde(default)]
    pub label: Option<String>,
    /// Record wall-clock timestamps; defaults to on for the HTTP backend only,
    /// so simulated and replayed runs stay byte-reproducible.
    #[serde(default)]
    pub timestamps: Option<bool>,
}

fn default_pathologies() -> Vec<String> {
    DEFAULT_PATHOLOGIES.iter().map(|s| s.to_string()).collect()
}

/// Command-line values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub template: Option<TemplateId>,
    pub pathologies: Vec<String>,
    pub backend: Option<BackendKind>,
    pub endpoint: Option<String>,
    pub scores: Option<PathBuf>,
    pub policy: Option<ReferralDirection>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub concurrency: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            reason: e.to_string(),
        })?;
        cfg.resolve_paths(origin.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Makes relative paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        if let Some(p) = &mut self.dataset.image_root {
            fix(p);
        }
        if let Some(p) = &mut self.explanations {
            fix(p);
        }
        if let Some(p) = &mut self.rules {
            fix(p);
        }
        if let Some(p) = &mut self.backend.fixture {
            fix(p);
        }
        if let Some(p) = &mut self.backend.cache {
            fix(p);
        }
        if let Some(r) = &mut self.referral {
            if let Some(p) = &mut r.scores {
                fix(p);
            }
            if let Some(p) = &mut r.calibration {
                fix(p);
            }
        }
        fix(&mut self.out);
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(t) = o.template {
            self.template = t;
        }
        if !o.pathologies.is_empty() {
            self.pathologies = o.pathologies;
        }
        if let Some(kind) = o.backend {
            self.backend.kind = kind;
        }
        if let Some(e) = o.endpoint {
            self.backend.endpoint = Some(e);
        }
        if let Some(s) = o.scores {
            self.referral.get_or_insert_with(ReferralConfig::default).scores = Some(s);
        }
        if let Some(p) = o.policy {
            self.referral.get_or_insert_with(ReferralConfig::default).direction = p;
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = o.out {
            self.out = out;
        }
        if let Some(k) = o.concurrency {
            self.backend.concurrency = k;
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.template.to_string())
    }

    pub fn record_timestamps(&self) -> bool {
        self.timestamps.unwrap_or(self.backend.kind == BackendKind::Http)
    }

    pub fn explanation_registry(&self) -> Result<ExplanationRegistry, ConfigError> {
        match &self.explanations {
            Some(path) => ExplanationRegistry::load(path).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(ExplanationRegistry::builtin()),
        }
    }

    /// Structural checks that need no I/O beyond the explanation registry.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.backend.concurrency == 0 {
            return invalid("backend.concurrency must be at least 1".into());
        }
        match self.backend.kind {
            BackendKind::Http if self.backend.endpoint.is_none() => {
                return invalid("the http backend needs backend.endpoint (or --endpoint)".into())
            }
            BackendKind::Replay if self.backend.fixture.is_none() => {
                return invalid("the replay backend needs backend.fixture".into())
            }
            BackendKind::Sim => self.backend.sim.validate().map_err(ConfigError::Invalid)?,
            _ => {}
        }
        if self.summarizer.kind == SummarizerKind::Http && self.summarizer.endpoint.is_none() {
            return invalid("the http summarizer needs summarizer.endpoint".into());
        }
        if self.dataset.kind == DatasetKind::Chexpert && self.pathologies.is_empty() {
            return invalid("no pathologies configured".into());
        }
        if self.template == TemplateId::Pt3 {
            let Some(r) = &self.referral else {
                return invalid("PT3 needs a [referral] section with scores and a threshold".into());
            };
            if r.scores.is_none() {
                return invalid("PT3 needs referral.scores (or --scores)".into());
            }
            if r.threshold.is_none() && r.calibration.is_none() {
                return invalid("PT3 needs referral.threshold or referral.calibration".into());
            }
            for n in [r.stated_percent_negative, r.stated_percent_positive] {
                if n == 0 || n >= 100 {
                    return invalid(format!("stated percent {n} must be strictly between 0 and 100"));
                }
            }
        }
        if self.template.needs_explanation() && self.dataset.kind == DatasetKind::Chexpert {
            let registry = self.explanation_registry()?;
            let missing: Vec<&str> = self
                .pathologies
                .iter()
                .filter(|p| !registry.contains(p))
                .map(String::as_str)
                .collect();
            if !missing.is_empty() {
                return invalid(format!(
                    "{} needs explanations for: {}",
                    self.template,
                    missing.join(", ")
                ));
            }
        }
        Ok(())
    }
}
