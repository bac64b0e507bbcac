//! Provider-agnostic chat completion with retries, a content-addressed
//! replay cache and a scripted backend for tests.
//!
//! Every agent call goes through a [`Completion`] implementation. The
//! [`Gateway`] wrapper validates requests and bounds the number of calls in
//! flight; the backend behind it decides where responses come from.

mod http;
mod replay;
mod scripted;

use std::collections::BTreeSet;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::digest::{CanonicalHasher, Digest};

pub use http::{HttpBackend, DEFAULT_BASE_URL, ENV_API_BASE_URL, ENV_API_KEY};
pub use replay::{CacheEntry, ReplayBackend, ReplayMode};
pub use scripted::{ScriptRule, ScriptedBackend};

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<i64>,
}

impl ChatRequest {
    /// Greedy decoding, no seed.
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        match self.messages.first() {
            None => return invalid("request has no messages"),
            Some(m) if m.role != Role::System => return invalid("first message must be a system message"),
            _ => {}
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return invalid("message content is empty");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return invalid("temperature must be a finite value >= 0");
        }
        if self.max_tokens == 0 {
            return invalid("max_tokens must be positive");
        }
        if self.model_id.is_empty() {
            return invalid("model_id is empty");
        }
        Ok(())
    }

    /// All message contents joined by newlines; what scripted rules match against.
    pub fn transcript_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

/// Content address of a request: SHA-256 over a field-ordered,
/// length-prefixed encoding of model, messages (in order), temperature,
/// max_tokens and seed.
pub fn cache_key(request: &ChatRequest) -> Digest {
    let mut h = CanonicalHasher::new("maka.chat-request.v1");
    h.str(&request.model_id);
    h.u64(request.messages.len() as u64);
    for m in &request.messages {
        h.str(m.role.as_str()).str(&m.content);
    }
    h.f64(request.temperature);
    h.u64(u64::from(request.max_tokens));
    h.opt_i64(request.seed);
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendTag {
    Http,
    Replay,
    Scripted,
}

impl BackendTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendTag::Http => "http",
            BackendTag::Replay => "replay",
            BackendTag::Scripted => "scripted",
        }
    }
}

impl std::str::FromStr for BackendTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendTag::Http),
            "replay" => Ok(BackendTag::Replay),
            "scripted" => Ok(BackendTag::Scripted),
            other => Err(format!("unknown backend {other:?} (expected http, replay or scripted)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub backend: BackendTag,
    /// Provider body exactly as received, when the response came over HTTP.
    #[serde(skip)]
    pub raw_body: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransientClass {
    Timeout,
    Connect,
    RateLimited,
    ServerError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub backoff_factor: f64,
    pub retry_on: BTreeSet<TransientClass>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 500,
            backoff_factor: 2.0,
            retry_on: [
                TransientClass::Timeout,
                TransientClass::Connect,
                TransientClass::RateLimited,
                TransientClass::ServerError,
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_attempts == 0 || self.base_delay_ms == 0 || self.backoff_factor.is_nan() || self.backoff_factor <= 1.0 {
            return Err(GatewayError::Configuration(
                "retry policy needs max_attempts >= 1, base_delay_ms > 0 and backoff_factor > 1".into(),
            ));
        }
        Ok(())
    }

    /// Delay before attempt `attempt + 1`, where `attempt` counts from 1.
    pub fn delay_after(&self, attempt: u32) -> std::time::Duration {
        let factor = self.backoff_factor.powi(attempt.saturating_sub(1) as i32);
        std::time::Duration::from_millis((self.base_delay_ms as f64 * factor).round() as u64)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transient failure after {attempts} attempt(s): {last}")]
    TransientFailure { attempts: u32, last: String },
    #[error("permanent failure: {0}")]
    PermanentFailure(String),
    #[error("no recorded response for request {0}")]
    ReplayMiss(Digest),
    #[error("script has no response left for request: {0}")]
    FixtureExhausted(String),
    #[error("gateway configuration: {0}")]
    Configuration(String),
    #[error("cache i/o: {0}")]
    Cache(String),
}

/// Anything that can answer a chat request.
pub trait Completion: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<T: Completion + ?Sized> Completion for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a InFlight);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

/// Validating front door to a backend with a global in-flight ceiling.
pub struct Gateway {
    backend: Arc<dyn Completion>,
    tag: BackendTag,
    in_flight: InFlight,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Completion>, tag: BackendTag, max_in_flight: usize) -> Self {
        Gateway {
            backend,
            tag,
            in_flight: InFlight { limit: max_in_flight.max(1), used: Mutex::new(0), freed: Condvar::new() },
        }
    }

    pub fn tag(&self) -> BackendTag {
        self.tag
    }
}

impl Completion for Gateway {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let _permit = self.in_flight.acquire();
        self.backend.complete(request)
    }
}
