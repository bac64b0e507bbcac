use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{BackendTag, ChatRequest, ChatResponse, Completion, GatewayError, RetryPolicy, TransientClass};

pub const ENV_API_KEY: &str = "MAKA_API_KEY";
pub const ENV_API_BASE_URL: &str = "MAKA_API_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

/// Client for `/v1/chat/completions`-shaped endpoints with bearer auth.
pub struct HttpBackend {
    client: Client,
    endpoint: String,
    api_key: String,
    policy: RetryPolicy,
}

enum Attempt {
    Done(ChatResponse),
    Transient(TransientClass, String),
    Permanent(String),
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: impl Into<String>, policy: RetryPolicy, timeout: Duration) -> Result<Self, GatewayError> {
        policy.validate()?;
        let api_key = api_key.into();
        if api_key.is_empty() {
            return Err(GatewayError::Configuration(format!("{ENV_API_KEY} is empty")));
        }
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Configuration(format!("http client: {e}")))?;
        let base = base_url.trim_end_matches('/');
        let endpoint = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        Ok(HttpBackend { client, endpoint, api_key, policy })
    }

    /// Reads `MAKA_API_KEY` (required) and `MAKA_API_BASE_URL`.
    pub fn from_env(policy: RetryPolicy, timeout: Duration) -> Result<Self, GatewayError> {
        let key = std::env::var(ENV_API_KEY)
            .map_err(|_| GatewayError::Configuration(format!("{ENV_API_KEY} is not set")))?;
        let base = std::env::var(ENV_API_BASE_URL).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        HttpBackend::new(&base, key, policy, timeout)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn request_body(request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let sent = self.client.post(&self.endpoint).bearer_auth(&self.api_key).json(body).send();
        let resp = match sent {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Transient(TransientClass::Timeout, e.to_string()),
            Err(e) if e.is_connect() => return Attempt::Transient(TransientClass::Connect, e.to_string()),
            Err(e) => return Attempt::Permanent(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Transient(TransientClass::Timeout, e.to_string()),
            Err(e) => return Attempt::Permanent(format!("reading body: {e}")),
        };
        if status == StatusCode::TOO_MANY_REQUESTS {
            return Attempt::Transient(TransientClass::RateLimited, format!("HTTP {status}"));
        }
        if status.is_server_error() {
            return Attempt::Transient(TransientClass::ServerError, format!("HTTP {status}"));
        }
        if !status.is_success() {
            return Attempt::Permanent(format!("HTTP {status}: {}", truncate(&text, 200)));
        }
        match parse_body(&text) {
            Some(mut r) => {
                r.raw_body = Some(text);
                Attempt::Done(r)
            }
            None => Attempt::Permanent(format!("malformed completion body: {}", truncate(&text, 200))),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Extracts `choices[0].message.content` and the usage counters.
pub(crate) fn parse_body(text: &str) -> Option<ChatResponse> {
    let v: Value = serde_json::from_str(text).ok()?;
    let content = v.pointer("/choices/0/message/content")?.as_str()?.to_string();
    let usage = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
    Some(ChatResponse {
        content,
        prompt_tokens: usage("prompt_tokens"),
        completion_tokens: usage("completion_tokens"),
        backend: BackendTag::Http,
        raw_body: None,
    })
}

impl Completion for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = HttpBackend::request_body(request);
        let mut attempt = 1;
        loop {
            match self.attempt(&body) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Permanent(msg) => return Err(GatewayError::PermanentFailure(msg)),
                Attempt::Transient(class, msg) => {
                    if !self.policy.retry_on.contains(&class) || attempt >= self.policy.max_attempts {
                        return Err(GatewayError::TransientFailure { attempts: attempt, last: msg });
                    }
                    log::debug!("attempt {attempt} failed ({msg}), retrying");
                    std::thread::sleep(self.policy.delay_after(attempt));
                    attempt += 1;
                }
            }
        }
    }
}
