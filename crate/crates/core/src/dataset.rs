//! CheXpert-style label tables: parsing, binarization and composition summaries.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Truth;

/// The 13 finding categories of the CheXpert labeler, in table order.
pub const DEFAULT_FINDINGS: [&str; 13] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
];

/// Non-label columns of the public CheXpert / MIMIC-CXR-JPG tables.
pub const DEFAULT_METADATA_COLUMNS: [&str; 5] = ["Sex", "Age", "Frontal/Lateral", "AP/PA", "study_id"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FindingLabel {
    Positive,
    Negative,
    Uncertain,
    Missing,
}

impl FindingLabel {
    /// Parses one label cell. Integer and one-decimal spellings are accepted.
    pub fn parse_cell(cell: &str) -> Option<FindingLabel> {
        match cell.trim() {
            "" => Some(FindingLabel::Missing),
            "1" | "1.0" => Some(FindingLabel::Positive),
            "0" | "0.0" => Some(FindingLabel::Negative),
            "-1" | "-1.0" => Some(FindingLabel::Uncertain),
            _ => None,
        }
    }

    /// Canonical cell spelling.
    pub fn as_cell(self) -> &'static str {
        match self {
            FindingLabel::Positive => "1.0",
            FindingLabel::Negative => "0.0",
            FindingLabel::Uncertain => "-1.0",
            FindingLabel::Missing => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Study {
    pub image_id: String,
    pub image_ref: String,
    pub labels: BTreeMap<String, FindingLabel>,
}

impl Study {
    pub fn label(&self, finding: &str) -> FindingLabel {
        self.labels.get(finding).copied().unwrap_or(FindingLabel::Missing)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertainAs {
    #[default]
    Negative,
    Positive,
    Exclude,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingAs {
    #[default]
    Negative,
    Exclude,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncertainPolicy {
    #[serde(default)]
    pub uncertain_as: UncertainAs,
    #[serde(default)]
    pub missing_as: MissingAs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binarized {
    Positive,
    Negative,
    Excluded,
}

impl Binarized {
    pub fn truth(self) -> Option<Truth> {
        match self {
            Binarized::Positive => Some(Truth::Positive),
            Binarized::Negative => Some(Truth::Negative),
            Binarized::Excluded => None,
        }
    }
}

pub fn binarize(label: FindingLabel, policy: UncertainPolicy) -> Binarized {
    match label {
        FindingLabel::Positive => Binarized::Positive,
        FindingLabel::Negative => Binarized::Negative,
        FindingLabel::Uncertain => match policy.uncertain_as {
            UncertainAs::Negative => Binarized::Negative,
            UncertainAs::Positive => Binarized::Positive,
            UncertainAs::Exclude => Binarized::Excluded,
        },
        FindingLabel::Missing => match policy.missing_as {
            MissingAs::Negative => Binarized::Negative,
            MissingAs::Exclude => Binarized::Excluded,
        },
    }
}

/// Column layout of a label table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    /// Column holding the image path; also the image id unless `id_column` is set.
    pub path_column: String,
    pub id_column: Option<String>,
    /// Finding names that every study carries (absent column means Missing).
    pub findings: Vec<String>,
    /// Columns that are neither path/id nor findings.
    pub metadata_columns: Vec<String>,
}

impl Default for TableSchema {
    fn default() -> Self {
        TableSchema {
            path_column: "Path".to_string(),
            id_column: None,
            findings: DEFAULT_FINDINGS.iter().map(|s| s.to_string()).collect(),
            metadata_columns: DEFAULT_METADATA_COLUMNS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    /// 1-based data row index (header excluded).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTable {
    pub studies: Vec<Study>,
    pub row_errors: Vec<RowError>,
    /// Finding columns present in the file but not in the schema, in file order.
    pub extra_findings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("label table has no header row")]
    MissingHeader,
    #[error("label table has no `{0}` column")]
    MissingColumn(String),
    #[error("duplicate image id `{image_id}` at row {row}")]
    DuplicateImageId { image_id: String, row: usize },
    #[error("label table i/o: {0}")]
    Csv(#[from] csv::Error),
}

/// Parses a comma-separated label table. Malformed rows are skipped and
/// reported; duplicate image ids abort the parse.
pub fn parse_label_table<R: Read>(source: R, schema: &TableSchema) -> Result<ParsedTable, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(IngestError::MissingHeader);
    }
    let column = |name: &str| headers.iter().position(|h| h == name);
    let path_idx = column(&schema.path_column).ok_or_else(|| IngestError::MissingColumn(schema.path_column.clone()))?;
    let id_idx = match &schema.id_column {
        Some(name) => column(name).ok_or_else(|| IngestError::MissingColumn(name.clone()))?,
        None => path_idx,
    };

    let mut finding_columns: Vec<(usize, String)> = Vec::new();
    let mut extra_findings = Vec::new();
    for (idx, name) in headers.iter().enumerate() {
        if idx == path_idx || idx == id_idx || schema.metadata_columns.iter().any(|m| m == name) {
            continue;
        }
        if !schema.findings.iter().any(|f| f == name) {
            extra_findings.push(name.to_string());
        }
        finding_columns.push((idx, name.to_string()));
    }

    let mut out = ParsedTable {
        extra_findings,
        ..Default::default()
    };
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.row_errors.push(RowError {
                    row,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if record.len() != headers.len() {
            out.row_errors.push(RowError {
                row,
                reason: format!("expected {} columns, found {}", headers.len(), record.len()),
            });
            continue;
        }
        let mut labels: BTreeMap<String, FindingLabel> = schema
            .findings
            .iter()
            .map(|f| (f.clone(), FindingLabel::Missing))
            .collect();
        let mut bad_cell = None;
        for (idx, name) in &finding_columns {
            match FindingLabel::parse_cell(&record[*idx]) {
                Some(label) => {
                    labels.insert(name.clone(), label);
                }
                None => {
                    bad_cell = Some(format!("unparseable label `{}` in column `{name}`", &record[*idx]));
                    break;
                }
            }
        }
        if let Some(reason) = bad_cell {
            out.row_errors.push(RowError { row, reason });
            continue;
        }
        let image_id = record[id_idx].to_string();
        if !seen.insert(image_id.clone()) {
            return Err(IngestError::DuplicateImageId { image_id, row });
        }
        out.studies.push(Study {
            image_id,
            image_ref: record[path_idx].to_string(),
            labels,
        });
    }
    for err in &out.row_errors {
        log::warn!("label table row {}: {}", err.row, err.reason);
    }
    Ok(out)
}

/// Writes studies back out as a canonical label table (path column first,
/// then schema findings, then any extra findings in sorted order).
pub fn write_label_table(studies: &[Study], schema: &TableSchema) -> String {
    let mut findings = schema.findings.clone();
    let extras: std::collections::BTreeSet<&String> = studies
        .iter()
        .flat_map(|s| s.labels.keys())
        .filter(|k| !schema.findings.contains(k))
        .collect();
    findings.extend(extras.into_iter().cloned());

    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec![schema.path_column.clone()];
    if let Some(id) = &schema.id_column {
        header.push(id.clone());
    }
    header.extend(findings.iter().cloned());
    writer.write_record(&header).expect("in-memory write");
    for study in studies {
        let mut row = vec![study.image_ref.clone()];
        if schema.id_column.is_some() {
            row.push(study.image_id.clone());
        }
        row.extend(findings.iter().map(|f| study.label(f).as_cell().to_string()));
        writer.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingCounts {
    pub positives: u64,
    pub negatives: u64,
    pub excluded: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub total_studies: u64,
    /// Per-finding counts in schema order.
    pub findings: Vec<(String, FindingCounts)>,
}

impl DatasetSummary {
    pub fn get(&self, finding: &str) -> Option<FindingCounts> {
        self.findings.iter().find(|(f, _)| f == finding).map(|(_, c)| *c)
    }

    /// Category / +Cases / -Cases table; an Excluded column appears only when
    /// some finding has exclusions.
    pub fn render_table(&self) -> String {
        let show_excluded = self.findings.iter().any(|(_, c)| c.excluded > 0);
        let width = self
            .findings
            .iter()
            .map(|(f, _)| f.len())
            .chain(std::iter::once("Category".len()))
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}  {:>8}  {:>8}", "Category", "+Cases", "-Cases");
        if show_excluded {
            let _ = write!(out, "  {:>8}", "Excluded");
        }
        out.push('\n');
        for (finding, c) in &self.findings {
            let _ = write!(out, "{:<width$}  {:>8}  {:>8}", finding, c.positives, c.negatives);
            if show_excluded {
                let _ = write!(out, "  {:>8}", c.excluded);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "Total studies: {}", self.total_studies);
        out
    }
}

pub fn summarize(studies: &[Study], findings: &[String], policy: UncertainPolicy) -> DatasetSummary {
    let per_finding = findings
        .iter()
        .map(|finding| {
            let mut counts = FindingCounts::default();
            for study in studies {
                match binarize(study.label(finding), policy) {
                    Binarized::Positive => counts.positives += 1,
                    Binarized::Negative => counts.negatives += 1,
                    Binarized::Excluded => counts.excluded += 1,
                }
            }
            (finding.clone(), counts)
        })
        .collect();
    DatasetSummary {
        total_studies: studies.len() as u64,
        findings: per_finding,
    }
}
