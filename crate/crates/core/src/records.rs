//! Run record files: a schema header line followed by one JSON record per
//! answered question.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{PopeCategory, Truth, UnknownPolicy};
use crate::normalize::Verdict;
use crate::prompt::TemplateId;

pub const RECORD_SCHEMA: &str = "medvqa.records";
pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub schema: String,
    pub version: u32,
    /// Display name of the run (defaults to the template name).
    pub label: String,
    pub template: TemplateId,
    pub backend_id: String,
    /// How `Unknown` verdicts are scored in reports of this run.
    pub unknown_as: UnknownPolicy,
    /// Digest of everything that determines the questions and answers;
    /// resume refuses a mismatch.
    pub identity: String,
}

impl RecordHeader {
    pub fn new(
        label: String,
        template: TemplateId,
        backend_id: String,
        unknown_as: UnknownPolicy,
        identity: String,
    ) -> Self {
        RecordHeader {
            schema: RECORD_SCHEMA.to_string(),
            version: RECORD_SCHEMA_VERSION,
            label,
            template,
            backend_id,
            unknown_as,
            identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub image_id: String,
    pub pathology: String,
    pub template: TemplateId,
    pub prompt_digest: String,
    pub raw_answer: String,
    pub verdict: Verdict,
    pub truth: Truth,
    pub referral_emitted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pope_category: Option<PopeCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: empty record file")]
    Empty { path: PathBuf },
    #[error("{path}: line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("{path}: schema `{schema}` v{version} is not {RECORD_SCHEMA} v{RECORD_SCHEMA_VERSION}")]
    Schema {
        path: PathBuf,
        schema: String,
        version: u32,
    },
}

/// Single appender for a record file.
pub struct RecordWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl RecordWriter {
    /// Creates (truncating) a record file and writes its header.
    pub fn create(path: &Path, header: &RecordHeader) -> Result<Self, RecordError> {
        let file = File::create(path).map_err(|source| RecordError::Io {
            path: path.into(),
            source,
        })?;
        let mut w = RecordWriter {
            out: BufWriter::new(file),
            path: path.into(),
        };
        w.write_line(header)?;
        Ok(w)
    }

    /// Re-opens an existing record file for appending; the caller has already
    /// validated its header.
    pub fn append(path: &Path) -> Result<Self, RecordError> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|source| RecordError::Io {
                path: path.into(),
                source,
            })?;
        Ok(RecordWriter {
            out: BufWriter::new(file),
            path: path.into(),
        })
    }

    pub fn write(&mut self, record: &VqaRecord) -> Result<(), RecordError> {
        self.write_line(record)
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<(), RecordError> {
        let io = |source| RecordError::Io {
            path: self.path.clone(),
            source,
        };
        let mut line = serde_json::to_vec(value).expect("records serialize");
        line.push(b'\n');
        self.out.write_all(&line).map_err(io)?;
        self.out.flush().map_err(|source| RecordError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordFile {
    pub header: RecordHeader,
    pub records: Vec<VqaRecord>,
    /// Set when an incomplete final line was dropped.
    pub truncated_tail: bool,
}

impl RecordFile {
    pub fn read(path: &Path) -> Result<Self, RecordError> {
        let file = File::open(path).map_err(|source| RecordError::Io {
            path: path.into(),
            source,
        })?;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|source| RecordError::Io {
                path: path.into(),
                source,
            })?;
        let mut iter = lines.iter().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = iter.next().ok_or_else(|| RecordError::Empty { path: path.into() })?;
        let header: RecordHeader = serde_json::from_str(first).map_err(|e| RecordError::Parse {
            path: path.into(),
            line: 1,
            reason: format!("bad header: {e}"),
        })?;
        if header.schema != RECORD_SCHEMA || header.version != RECORD_SCHEMA_VERSION {
            return Err(RecordError::Schema {
                path: path.into(),
                schema: header.schema,
                version: header.version,
            });
        }
        let last_index = lines.len().saturating_sub(1);
        let mut records = Vec::new();
        let mut truncated_tail = false;
        for (i, line) in iter {
            match serde_json::from_str::<VqaRecord>(line) {
                Ok(r) => records.push(r),
                Err(_) if i == last_index => {
                    log::warn!("{}: dropping incomplete final line", path.display());
                    truncated_tail = true;
                }
                Err(e) => {
                    return Err(RecordError::Parse {
                        path: path.into(),
                        line: i + 1,
                        reason: e.to_string(),
                    })
                }
            }
        }
        Ok(RecordFile {
            header,
            records,
            truncated_tail,
        })
    }
}
