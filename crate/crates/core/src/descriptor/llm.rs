//! Chat-completion requests, transports and the retrying, caching call path.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::cache::{CacheRecord, ResponseCache};
use crate::util::Clock;

pub const ENV_URL: &str = "COMPDESC_LLM_URL";
pub const ENV_TOKEN: &str = "COMPDESC_LLM_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LlmRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

impl LlmRequest {
    /// Final message of a well-formed request; always a user turn.
    pub fn question(&self) -> &str {
        self.messages.last().map_or("", |m| m.content.as_str())
    }

    /// SHA-256 over (model, messages, temperature); the cache key.
    pub fn cache_key(&self) -> String {
        let material = KeyMaterial {
            model: &self.model,
            messages: &self.messages,
            temperature: self.temperature,
        };
        let bytes = serde_json::to_vec(&material).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// SHA-256 over the full wire body, including `max_tokens`.
    pub fn request_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// How a single transport attempt failed.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportFailure {
    /// Worth retrying: timeouts, connection errors, 429, 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    /// Non-retryable refusal, e.g. a 400 or a missing replay entry.
    #[error("rejected: {0}")]
    Rejected(String),
    /// The transport may not touch the network.
    #[error("network access is disabled")]
    Offline,
}

pub trait Transport: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, TransportFailure>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("transport failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("offline and no cached response for key {0}")]
    CacheMiss(String),
    #[error("cache write failed: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): base, 2*base, 4*base, ...
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }
}

/// Serves from `cache` when possible; otherwise calls `transport`, retrying
/// transient failures with exponential backoff, and stores the answer.
pub fn call_llm(
    request: &LlmRequest,
    cache: &ResponseCache,
    transport: &dyn Transport,
    retry: &RetryPolicy,
    clock: Clock,
) -> Result<String, LlmError> {
    let key = request.cache_key();
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let mut attempt = 0u32;
    loop {
        match transport.complete(request) {
            Ok(text) => {
                cache
                    .insert(CacheRecord {
                        key,
                        model: request.model.clone(),
                        request_hash: request.request_hash(),
                        response: text.clone(),
                        created_at: clock.timestamp(),
                    })
                    .map_err(|e| LlmError::Cache(e.to_string()))?;
                return Ok(text);
            }
            Err(TransportFailure::Transient(msg)) => {
                if attempt >= retry.max_retries {
                    return Err(LlmError::Transport {
                        attempts: attempt + 1,
                        last: msg,
                    });
                }
                let delay = retry.backoff(attempt);
                log::warn!("transient LLM failure ({msg}); retrying in {delay:?}");
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(TransportFailure::Auth(msg)) => return Err(LlmError::Auth(msg)),
            Err(TransportFailure::Malformed(msg)) => return Err(LlmError::MalformedResponse(msg)),
            Err(TransportFailure::Rejected(msg)) => {
                return Err(LlmError::Transport {
                    attempts: attempt + 1,
                    last: msg,
                })
            }
            Err(TransportFailure::Offline) => return Err(LlmError::CacheMiss(key)),
        }
    }
}

/// Extracts `choices[0].message.content` from a chat-completion body.
pub fn extract_content(body: &str) -> Result<String, TransportFailure> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| TransportFailure::Malformed(format!("invalid JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| TransportFailure::Malformed("missing choices[0].message.content".into()))
}

/// HTTPS JSON chat-completion endpoint with bearer auth.
pub struct HttpTransport {
    url: String,
    token: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, token: impl Into<String>, timeout: Duration) -> Result<Self, TransportFailure> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportFailure::Rejected(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            url: url.into(),
            token: token.into(),
            client,
        })
    }

    /// Reads `COMPDESC_LLM_URL` and `COMPDESC_LLM_TOKEN`.
    pub fn from_env(timeout: Duration) -> Option<Result<Self, TransportFailure>> {
        let url = std::env::var(ENV_URL).ok()?;
        let token = std::env::var(ENV_TOKEN).ok()?;
        Some(Self::new(url, token, timeout))
    }
}

impl Transport for HttpTransport {
    fn complete(&self, request: &LlmRequest) -> Result<String, TransportFailure> {
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.token)
            .json(request)
            .send()
            .map_err(|e| TransportFailure::Transient(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| TransportFailure::Transient(format!("reading body: {e}")))?;
        match status.as_u16() {
            200..=299 => extract_content(&body),
            401 | 403 => Err(TransportFailure::Auth(format!("HTTP {status}"))),
            408 | 429 | 500..=599 => Err(TransportFailure::Transient(format!("HTTP {status}"))),
            _ => Err(TransportFailure::Rejected(format!("HTTP {status}: {body}"))),
        }
    }
}

/// Refuses every call; with a primed cache this makes runs hermetic.
pub struct OfflineTransport;

impl Transport for OfflineTransport {
    fn complete(&self, _request: &LlmRequest) -> Result<String, TransportFailure> {
        Err(TransportFailure::Offline)
    }
}

/// One recorded exchange, keyed by the live question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub question: String,
    pub response: String,
}

/// Answers from recorded transcripts, matching on the final user message so
/// recordings survive changes to in-context sampling.
#[derive(Debug, Clone, Default)]
pub struct ReplayTransport {
    answers: HashMap<String, String>,
}

impl ReplayTransport {
    pub fn new(entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        Self {
            answers: entries.into_iter().map(|e| (e.question, e.response)).collect(),
        }
    }

    /// Loads a JSON-lines file of `{"question","response"}` records.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })?;
            entries.push(e);
        }
        Ok(Self::new(entries))
    }
}

impl Transport for ReplayTransport {
    fn complete(&self, request: &LlmRequest) -> Result<String, TransportFailure> {
        self.answers
            .get(request.question())
            .cloned()
            .ok_or_else(|| TransportFailure::Rejected(format!("no recording for {:?}", request.question())))
    }
}
