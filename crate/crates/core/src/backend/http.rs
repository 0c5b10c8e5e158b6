//! HTTP clients for the remote VQA and summarizer services.
//!
//! VQA: `POST endpoint` with `{"image_id", "prompt", "image_url" | "image_b64", "generation"?}`,
//! success is status 200 with `{"text": ...}`.
//! Summarizer: `POST endpoint` with `{"question", "answer"}`, reply
//! `{"verdict": "yes" | "no" | "unknown"}`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_request, BackendError, Summarizer, VqaBackend, VqaRequest, VqaResponse};
use crate::normalize::VerdictValue;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff with up to one base delay of jitter.
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << (attempt - 1).min(16));
        let jitter = if self.base_delay_ms > 0 {
            rand::thread_rng().gen_range(0..self.base_delay_ms)
        } else {
            0
        };
        Duration::from_millis(exp + jitter)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageMode {
    /// URLs are sent as `image_url`, local paths are read and inlined.
    #[default]
    Auto,
    /// Always send `image_ref` verbatim as `image_url`.
    Url,
    /// Always read the file and send `image_b64`.
    Inline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub image_mode: ImageMode,
    /// Opaque generation settings forwarded as `generation`.
    #[serde(default)]
    pub generation: Option<Value>,
}

fn default_timeout() -> u64 {
    120
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            retry: RetryPolicy::default(),
            timeout_secs: default_timeout(),
            image_mode: ImageMode::Auto,
            generation: None,
        }
    }
}

fn agent(timeout_secs: u64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(timeout_secs)))
        .build()
        .into()
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fatal(BackendError),
}

fn post_with_retry<T>(
    agent: &ureq::Agent,
    endpoint: &str,
    body: &Value,
    retry: &RetryPolicy,
    mut parse: impl FnMut(String) -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let attempts = retry.max_attempts.max(1);
    let mut last_error = String::new();
    for attempt in 1..=attempts {
        let outcome = match agent.post(endpoint).send_json(body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let text = response.body_mut().read_to_string().unwrap_or_default();
                match status {
                    200 => match parse(text) {
                        Ok(v) => Attempt::Done(v),
                        Err(e) => Attempt::Fatal(e),
                    },
                    408 | 429 | 500..=599 => Attempt::Retry(format!("status {status}")),
                    _ => Attempt::Fatal(BackendError::Rejected { status, body: text }),
                }
            }
            Err(e) => Attempt::Retry(e.to_string()),
        };
        match outcome {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retry(reason) => {
                log::debug!("attempt {attempt}/{attempts} to {endpoint} failed: {reason}");
                last_error = reason;
                if attempt < attempts {
                    std::thread::sleep(retry.delay(attempt));
                }
            }
        }
    }
    Err(BackendError::Unavailable { attempts, last_error })
}

pub struct HttpBackend {
    id: String,
    config: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct TextReply {
    text: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        HttpBackend {
            id: format!("http:{}", config.endpoint),
            agent: agent(config.timeout_secs),
            config,
        }
    }

    /// Request document for one question. The prompt is passed through untouched.
    pub fn request_body(&self, request: &VqaRequest) -> Result<Value, BackendError> {
        let is_url = request.image_ref.starts_with("http://") || request.image_ref.starts_with("https://");
        let inline = match self.config.image_mode {
            ImageMode::Url => false,
            ImageMode::Inline => true,
            ImageMode::Auto => !is_url,
        };
        let mut body = json!({
            "image_id": request.image_id,
            "prompt": request.prompt,
        });
        if inline {
            let bytes = std::fs::read(&request.image_ref)
                .map_err(|e| BackendError::InvalidRequest(format!("cannot read image {}: {e}", request.image_ref)))?;
            body["image_b64"] = Value::String(base64::engine::general_purpose::STANDARD.encode(bytes));
        } else {
            body["image_url"] = Value::String(request.image_ref.clone());
        }
        if let Some(generation) = &self.config.generation {
            body["generation"] = generation.clone();
        }
        Ok(body)
    }
}

impl VqaBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn ask(&self, request: &VqaRequest) -> Result<VqaResponse, BackendError> {
        check_request(request)?;
        let body = self.request_body(request)?;
        let started = Instant::now();
        let text = post_with_retry(&self.agent, &self.config.endpoint, &body, &self.config.retry, |raw| {
            serde_json::from_str::<TextReply>(&raw)
                .map(|r| r.text)
                .map_err(|e| BackendError::Malformed(format!("expected {{\"text\": ...}}: {e}")))
        })?;
        if text.is_empty() {
            log::warn!("empty generation for image {}", request.image_id);
        }
        Ok(VqaResponse {
            text,
            latency: started.elapsed(),
            backend_id: self.id.clone(),
        })
    }
}

pub struct HttpSummarizer {
    endpoint: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
    non_verdicts: AtomicU64,
}

impl HttpSummarizer {
    pub fn new(endpoint: impl Into<String>, retry: RetryPolicy, timeout_secs: u64) -> Self {
        HttpSummarizer {
            endpoint: endpoint.into(),
            retry,
            agent: agent(timeout_secs),
            non_verdicts: AtomicU64::new(0),
        }
    }

    /// Replies that were not one of yes/no/unknown.
    pub fn non_verdict_count(&self) -> u64 {
        self.non_verdicts.load(Ordering::SeqCst)
    }
}

impl Summarizer for HttpSummarizer {
    fn summarize(&self, question: &str, answer: &str) -> Result<VerdictValue, BackendError> {
        let body = json!({ "question": question, "answer": answer });
        post_with_retry(&self.agent, &self.endpoint, &body, &self.retry, |raw| {
            let verdict = serde_json::from_str::<Value>(&raw)
                .ok()
                .and_then(|v| v.get("verdict").and_then(Value::as_str).map(str::to_ascii_lowercase));
            Ok(match verdict.as_deref() {
                Some("yes") => VerdictValue::Yes,
                Some("no") => VerdictValue::No,
                Some("unknown") => VerdictValue::Unknown,
                _ => {
                    self.non_verdicts.fetch_add(1, Ordering::SeqCst);
                    VerdictValue::Unknown
                }
            })
        })
    }
}
