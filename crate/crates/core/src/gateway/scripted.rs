use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendTag, ChatRequest, ChatResponse, Completion, GatewayError};

/// One scripted answer. A rule applies when every `expect` pattern matches
/// the request transcript; it is consumed after `times` uses unless `repeat`
/// is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, deserialize_with = "one_or_many")]
    pub expect: Vec<String>,
    pub response: String,
    #[serde(default = "one")]
    pub times: u32,
    #[serde(default)]
    pub repeat: bool,
}

fn one() -> u32 {
    1
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Patterns {
        One(String),
        Many(Vec<String>),
    }
    Ok(match Patterns::deserialize(d)? {
        Patterns::One(s) => vec![s],
        Patterns::Many(v) => v,
    })
}

impl ScriptRule {
    pub fn once(response: impl Into<String>) -> Self {
        ScriptRule { expect: Vec::new(), response: response.into(), times: 1, repeat: false }
    }

    pub fn when(patterns: &[&str], response: impl Into<String>) -> Self {
        ScriptRule {
            expect: patterns.iter().map(|p| p.to_string()).collect(),
            response: response.into(),
            times: 1,
            repeat: false,
        }
    }

    pub fn always(mut self) -> Self {
        self.repeat = true;
        self
    }

    pub fn times(mut self, n: u32) -> Self {
        self.times = n;
        self
    }
}

struct Slot {
    patterns: Vec<Regex>,
    response: String,
    remaining: Option<u32>,
}

/// Deterministic backend that answers from an ordered rule list. The first
/// rule with uses left whose patterns all match wins.
pub struct ScriptedBackend {
    slots: Mutex<Vec<Slot>>,
    calls: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Result<Self, GatewayError> {
        let slots = rules
            .into_iter()
            .map(|r| {
                let patterns = r
                    .expect
                    .iter()
                    .map(|p| Regex::new(p).map_err(|e| GatewayError::Configuration(format!("script pattern {p:?}: {e}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Slot { patterns, response: r.response, remaining: (!r.repeat).then_some(r.times) })
            })
            .collect::<Result<Vec<_>, GatewayError>>()?;
        Ok(ScriptedBackend { slots: Mutex::new(slots), calls: Mutex::new(Vec::new()) })
    }

    /// Unconditional single-use responses, answered in order.
    pub fn from_responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let rules = responses.into_iter().map(ScriptRule::once).collect();
        ScriptedBackend::new(rules).expect("unconditional rules have no patterns")
    }

    /// Reads a JSON array of [`ScriptRule`]s.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Configuration(format!("script {}: {e}", path.display())))?;
        let rules: Vec<ScriptRule> = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Configuration(format!("script {}: {e}", path.display())))?;
        ScriptedBackend::new(rules)
    }

    /// Every request answered or refused so far, in arrival order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl Completion for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let transcript = request.transcript_text();
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).push(request.clone());
        let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        let slot = slots
            .iter_mut()
            .find(|s| s.remaining != Some(0) && s.patterns.iter().all(|p| p.is_match(&transcript)));
        let Some(slot) = slot else {
            let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
            let preview: String = last.chars().take(80).collect();
            return Err(GatewayError::FixtureExhausted(preview));
        };
        if let Some(n) = slot.remaining.as_mut() {
            *n -= 1;
        }
        Ok(ChatResponse {
            content: slot.response.clone(),
            prompt_tokens: transcript.split_whitespace().count() as u64,
            completion_tokens: slot.response.split_whitespace().count() as u64,
            backend: BackendTag::Scripted,
            raw_body: None,
        })
    }
}
