use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{cache_key, BackendTag, ChatRequest, ChatResponse, Completion, GatewayError};
use crate::digest::Digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// A miss is an error.
    Strict,
    /// A miss goes to the upstream backend and the answer is stored.
    Record,
}

impl std::str::FromStr for ReplayMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(ReplayMode::Strict),
            "record" => Ok(ReplayMode::Record),
            other => Err(format!("unknown replay mode {other:?} (expected strict or record)")),
        }
    }
}

/// One cache file: `<cache_dir>/<digest>.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: Digest,
    pub request: ChatRequest,
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Provider response body, kept for audit. `null` when the upstream was not HTTP.
    pub raw_response: Option<serde_json::Value>,
}

pub struct ReplayBackend {
    dir: PathBuf,
    mode: ReplayMode,
    upstream: Option<Arc<dyn Completion>>,
    writer: Mutex<()>,
}

impl ReplayBackend {
    pub fn strict(dir: impl Into<PathBuf>) -> Self {
        ReplayBackend { dir: dir.into(), mode: ReplayMode::Strict, upstream: None, writer: Mutex::new(()) }
    }

    pub fn recording(dir: impl Into<PathBuf>, upstream: Arc<dyn Completion>) -> Self {
        ReplayBackend { dir: dir.into(), mode: ReplayMode::Record, upstream: Some(upstream), writer: Mutex::new(()) }
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    pub fn path_for(&self, key: &Digest) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn lookup(&self, key: &Digest) -> Result<Option<CacheEntry>, GatewayError> {
        read_entry(&self.path_for(key))
    }

    fn store(&self, entry: &CacheEntry) -> Result<(), GatewayError> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let cache_err = |e: std::io::Error| GatewayError::Cache(e.to_string());
        fs::create_dir_all(&self.dir).map_err(cache_err)?;
        let path = self.path_for(&entry.key);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(entry).map_err(|e| GatewayError::Cache(e.to_string()))?;
        fs::write(&tmp, body).map_err(cache_err)?;
        fs::rename(&tmp, &path).map_err(cache_err)
    }
}

fn read_entry(path: &Path) -> Result<Option<CacheEntry>, GatewayError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
    }
}

impl Completion for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = cache_key(request);
        if let Some(entry) = self.lookup(&key)? {
            return Ok(ChatResponse {
                content: entry.content,
                prompt_tokens: entry.prompt_tokens,
                completion_tokens: entry.completion_tokens,
                backend: BackendTag::Replay,
                raw_body: None,
            });
        }
        let upstream = match (self.mode, &self.upstream) {
            (ReplayMode::Record, Some(up)) => up,
            _ => return Err(GatewayError::ReplayMiss(key)),
        };
        let response = upstream.complete(request)?;
        let raw_response = response.raw_body.as_deref().and_then(|b| serde_json::from_str(b).ok());
        self.store(&CacheEntry {
            key,
            request: request.clone(),
            content: response.content.clone(),
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
            raw_response,
        })?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, ScriptedBackend};

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::system("s"), ChatMessage::user(text)])
    }

    #[test]
    fn strict_miss_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let rb = ReplayBackend::strict(dir.path());
        assert!(matches!(rb.complete(&req("a")), Err(GatewayError::ReplayMiss(_))));
    }

    #[test]
    fn record_then_replay_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let upstream = Arc::new(ScriptedBackend::from_responses(["  odd\r\nbytes ünïcode  "]));
        let rec = ReplayBackend::recording(dir.path(), upstream.clone());
        let live = rec.complete(&req("a")).unwrap();
        assert_eq!(live.backend, BackendTag::Scripted);

        let replay = ReplayBackend::strict(dir.path());
        let again = replay.complete(&req("a")).unwrap();
        assert_eq!(again.content.as_bytes(), live.content.as_bytes());
        assert_eq!(again.backend, BackendTag::Replay);
        // Recording again hits the cache instead of the (now exhausted) upstream.
        assert!(rec.complete(&req("a")).is_ok());
        assert_eq!(upstream.call_count(), 1);
    }

    #[test]
    fn cache_file_holds_request_for_audit() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ReplayBackend::recording(dir.path(), Arc::new(ScriptedBackend::from_responses(["x"])));
        let r = req("audit me");
        rec.complete(&r).unwrap();
        let entry = rec.lookup(&cache_key(&r)).unwrap().unwrap();
        assert_eq!(entry.request, r);
        assert_eq!(entry.key, cache_key(&r));
    }
}
