//! Recorded-response backend. The fixture is JSON lines, one
//! `{"key", "image_id", "prompt_digest", "text"}` object per recorded request.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_request, prompt_digest, request_key, BackendError, VqaBackend, VqaRequest, VqaResponse};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub key: String,
    pub image_id: String,
    pub prompt_digest: String,
    pub text: String,
}

impl ReplayEntry {
    pub fn new(image_id: &str, prompt: &str, text: impl Into<String>) -> Self {
        ReplayEntry {
            key: request_key(image_id, prompt),
            image_id: image_id.to_string(),
            prompt_digest: prompt_digest(prompt),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBackend {
    id: String,
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn new(id: impl Into<String>, entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        ReplayBackend {
            id: id.into(),
            responses: entries.into_iter().map(|e| (e.key, e.text)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let fail = |e: String| BackendError::Malformed(format!("{}: {e}", path.display()));
        let file = std::fs::File::open(path).map_err(|e| fail(e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| fail(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line).map_err(|e| fail(format!("line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::new("replay", entries))
    }

    pub fn write_fixture(path: &Path, entries: &[ReplayEntry]) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn contains(&self, request: &VqaRequest) -> bool {
        self.responses.contains_key(&request.key())
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl VqaBackend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn ask(&self, request: &VqaRequest) -> Result<VqaResponse, BackendError> {
        check_request(request)?;
        let key = request.key();
        match self.responses.get(&key) {
            Some(text) => Ok(VqaResponse {
                text: text.clone(),
                latency: Duration::ZERO,
                backend_id: self.id.clone(),
            }),
            None => Err(BackendError::FixtureMissing {
                key,
                image_id: request.image_id.clone(),
            }),
        }
    }
}
