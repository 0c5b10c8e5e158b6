//! VQA and summarizer backends.
//!
//! All VQA backends implement [`VqaBackend::ask`]; they must tolerate
//! concurrent calls from the evaluation loop.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::normalize::VerdictValue;

mod cache;
mod http;
mod replay;
mod sim;
mod summarizer;

pub use cache::{CacheEntry, CachedBackend, ResponseCache};
pub use http::{HttpBackend, HttpConfig, HttpSummarizer, ImageMode, RetryPolicy};
pub use replay::{ReplayBackend, ReplayEntry};
pub use sim::{
    parse_prompt, simulate_answer, PromptFacts, SimBackend, SimulatorParams, YesRates, NO_PHRASES, YES_PHRASES,
};
pub use summarizer::LexicalSummarizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaRequest {
    pub image_id: String,
    pub image_ref: String,
    pub prompt: String,
}

impl VqaRequest {
    pub fn prompt_digest(&self) -> String {
        prompt_digest(&self.prompt)
    }

    /// Digest over image id and prompt; the replay fixture key.
    pub fn key(&self) -> String {
        request_key(&self.image_id, &self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaResponse {
    pub text: String,
    pub latency: Duration,
    pub backend_id: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("backend rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("no replay fixture for request {key} (image {image_id})")]
    FixtureMissing { key: String, image_id: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub trait VqaBackend: Send + Sync {
    fn id(&self) -> &str;

    fn ask(&self, request: &VqaRequest) -> Result<VqaResponse, BackendError>;
}

impl<T: VqaBackend + ?Sized> VqaBackend for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn ask(&self, request: &VqaRequest) -> Result<VqaResponse, BackendError> {
        (**self).ask(request)
    }
}

impl<T: VqaBackend + ?Sized> VqaBackend for std::sync::Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn ask(&self, request: &VqaRequest) -> Result<VqaResponse, BackendError> {
        (**self).ask(request)
    }
}

/// Reduces a long answer to a verdict (the summarizer service contract).
pub trait Summarizer: Send + Sync {
    fn summarize(&self, question: &str, answer: &str) -> Result<VerdictValue, BackendError>;
}

/// Hex SHA-256 of the prompt bytes.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub fn request_key(image_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(image_id.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

fn check_request(request: &VqaRequest) -> Result<(), BackendError> {
    if request.prompt.is_empty() {
        return Err(BackendError::InvalidRequest("empty prompt".into()));
    }
    Ok(())
}
