//! Access to chat-completions-compatible inference endpoints.
//!
//! An [`Endpoint`] wraps a transport (HTTP, replay file, or the mock backend
//! from [`crate::mock`]) behind a shared retry/concurrency policy. Per-endpoint
//! parallelism is capped by `max_parallel`; retries apply only to transport and
//! 5xx failures, never to well-formed empty outputs.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum ClientError {
    /// Transport or 5xx failure that survived all retry attempts.
    #[error("retriable failure after {attempts} attempt(s): {message}")]
    Retriable { attempts: u32, message: String },
    /// 4xx or otherwise non-retriable endpoint misconfiguration.
    #[error("endpoint configuration error: {0}")]
    Config(String),
    /// The endpoint answered with an empty completion.
    #[error("empty completion")]
    EmptyCompletion,
    /// The mock/replay backend had no entry for this request.
    #[error("no scripted response for request fingerprint {fingerprint}")]
    ScriptMiss { fingerprint: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl ClientError {
    fn is_retriable(&self) -> bool {
        matches!(self, ClientError::Retriable { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// One chat-completion request. `seed` is passed through to endpoints that
/// support it and silently carried by the mock's fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// A single user-role message with sampling parameters. All three prompt
    /// templates are sent this way, with no system message.
    pub fn user(content: impl Into<String>, temperature: f64, top_p: f64, max_tokens: u32) -> Self {
        ChatRequest {
            messages: vec![Message {
                role: Role::User,
                content: content.into(),
            }],
            temperature,
            top_p,
            max_tokens,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(ClientError::InvalidRequest(
                "request must contain at least one user message".into(),
            ));
        }
        if self.temperature < 0.0 || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ClientError::InvalidRequest(
                "sampling parameters out of range".into(),
            ));
        }
        Ok(())
    }

    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Canonical request fingerprint used for mock scripting and replay files.
pub fn fingerprint(req: &ChatRequest) -> String {
    let canonical = serde_json::to_vec(req).expect("request serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Something that can answer a single chat request. Implementations classify
/// their own failures as retriable or not.
pub trait Transport: Send + Sync {
    fn send(&self, req: &ChatRequest, model: &str) -> Result<String, ClientError>;
}

/// Connection settings for one endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    /// Name of an environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
}

fn default_timeout_secs() -> u64 {
    120
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_parallel() -> usize {
    8
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key: None,
            api_key_env: None,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            max_parallel: default_max_parallel(),
        }
    }

    fn resolved_api_key(&self) -> Option<String> {
        if let Some(k) = &self.api_key {
            return Some(k.clone());
        }
        self.api_key_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok())
    }
}

/// Counting semaphore on std primitives; caps in-flight requests per endpoint.
struct Limiter {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.limiter.permits.lock().unwrap();
        *permits += 1;
        self.limiter.cv.notify_one();
    }
}

/// A reachable model: transport plus retry and admission policy. Cloning is
/// cheap and shares the concurrency limit and recorder.
#[derive(Clone)]
pub struct Endpoint {
    pub config: EndpointConfig,
    transport: Arc<dyn Transport>,
    limiter: Arc<Limiter>,
    recorder: Option<Arc<Recorder>>,
    /// Backoff base; tests shrink it to keep retry paths fast.
    retry_base: Duration,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("base_url", &self.config.base_url)
            .field("model_name", &self.config.model_name)
            .finish()
    }
}

impl Endpoint {
    pub fn from_transport(config: EndpointConfig, transport: Arc<dyn Transport>) -> Self {
        let limiter = Arc::new(Limiter::new(config.max_parallel));
        Endpoint {
            config,
            transport,
            limiter,
            recorder: None,
            retry_base: Duration::from_millis(100),
        }
    }

    pub fn http(config: EndpointConfig) -> Result<Self, ClientError> {
        let transport = HttpTransport::new(&config)?;
        Ok(Self::from_transport(config, Arc::new(transport)))
    }

    /// Replays traffic from a previously recorded file; misses are errors.
    pub fn replay(config: EndpointConfig, path: &Path) -> Result<Self, ClientError> {
        let map = load_replay_file(path)
            .map_err(|e| ClientError::Config(format!("replay file {}: {e}", path.display())))?;
        Ok(Self::from_transport(config, Arc::new(ReplayTransport { map })))
    }

    /// Records every completed request/response to `path` on drop-free
    /// explicit flush via [`Endpoint::save_recording`].
    pub fn with_recording(mut self, path: PathBuf) -> Self {
        self.recorder = Some(Arc::new(Recorder {
            path,
            entries: Mutex::new(BTreeMap::new()),
        }));
        self
    }

    pub fn with_retry_base(mut self, base: Duration) -> Self {
        self.retry_base = base;
        self
    }

    pub fn save_recording(&self) -> std::io::Result<()> {
        if let Some(rec) = &self.recorder {
            rec.save()?;
        }
        Ok(())
    }

    /// Completes one request, applying the retry and admission policy.
    pub fn complete(&self, req: &ChatRequest) -> Result<String, ClientError> {
        req.validate()?;
        let _permit = self.limiter.acquire();
        let started = std::time::Instant::now();
        let attempts = self.config.max_retries.max(1);
        let mut last_err = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry_base * 2u32.pow(attempt - 1));
            }
            match self.transport.send(req, &self.config.model_name) {
                Ok(text) => {
                    log::debug!(
                        "completion ok model={} latency_ms={} chars={}",
                        self.config.model_name,
                        started.elapsed().as_millis(),
                        text.len()
                    );
                    if text.is_empty() {
                        return Err(ClientError::EmptyCompletion);
                    }
                    if let Some(rec) = &self.recorder {
                        rec.record(fingerprint(req), text.clone());
                    }
                    return Ok(text);
                }
                Err(e) if e.is_retriable() => {
                    log::warn!("attempt {} failed: {e}", attempt + 1);
                    last_err = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        match last_err {
            Some(ClientError::Retriable { message, .. }) => Err(ClientError::Retriable {
                attempts,
                message,
            }),
            Some(e) => Err(e),
            None => unreachable!("attempts >= 1"),
        }
    }

    /// Completes a keyed batch. Results carry the same keys as inputs, in the
    /// same order; per-item errors do not abort the batch.
    pub fn complete_batch(
        &self,
        reqs: Vec<(String, ChatRequest)>,
    ) -> Result<Vec<(String, Result<String, ClientError>)>, ClientError> {
        let mut seen = HashSet::new();
        for (k, _) in &reqs {
            if !seen.insert(k.clone()) {
                return Err(ClientError::InvalidRequest(format!("duplicate batch key {k}")));
            }
        }
        let results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = reqs
                .iter()
                .map(|(key, req)| {
                    let ep = self;
                    scope.spawn(move || (key.clone(), ep.complete(req)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        Ok(results)
    }
}

/// HTTP transport for the de-facto chat-completions wire shape.
struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    fn new(config: &EndpointConfig) -> Result<Self, ClientError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        let base = config.base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/v1/chat/completions")
        };
        Ok(HttpTransport {
            client,
            url,
            api_key: config.resolved_api_key(),
        })
    }
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

impl Transport for HttpTransport {
    fn send(&self, req: &ChatRequest, model: &str) -> Result<String, ClientError> {
        let mut body = serde_json::json!({
            "model": model,
            "messages": req.messages,
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = serde_json::json!(seed);
        }
        let mut request = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let resp = request.send().map_err(|e| ClientError::Retriable {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(ClientError::Retriable {
                attempts: 1,
                message: format!("HTTP {status}"),
            });
        }
        if status.is_client_error() {
            return Err(ClientError::Config(format!("HTTP {status}")));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| ClientError::Retriable {
            attempts: 1,
            message: format!("malformed response body: {e}"),
        })?;
        let first = parsed
            .choices
            .into_iter()
            .next()
            .ok_or(ClientError::EmptyCompletion)?;
        Ok(first.message.content.unwrap_or_default())
    }
}

#[derive(Serialize, Deserialize)]
struct ReplayEntry {
    fingerprint: String,
    response: String,
}

fn load_replay_file(path: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let file = std::fs::File::open(path)?;
    let mut map = BTreeMap::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ReplayEntry = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        map.insert(entry.fingerprint, entry.response);
    }
    Ok(map)
}

struct ReplayTransport {
    map: BTreeMap<String, String>,
}

impl Transport for ReplayTransport {
    fn send(&self, req: &ChatRequest, _model: &str) -> Result<String, ClientError> {
        let fp = fingerprint(req);
        self.map
            .get(&fp)
            .cloned()
            .ok_or(ClientError::ScriptMiss { fingerprint: fp })
    }
}

/// Collects fingerprint -> response pairs for later offline replay.
struct Recorder {
    path: PathBuf,
    entries: Mutex<BTreeMap<String, String>>,
}

impl Recorder {
    fn record(&self, fp: String, response: String) {
        self.entries.lock().unwrap().insert(fp, response);
    }

    fn save(&self) -> std::io::Result<()> {
        let entries = self.entries.lock().unwrap();
        let mut out = std::fs::File::create(&self.path)?;
        for (fp, response) in entries.iter() {
            let line = serde_json::to_string(&ReplayEntry {
                fingerprint: fp.clone(),
                response: response.clone(),
            })?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::MockBackend;

    #[test]
    fn scripted_mock_echoes() {
        let ep = MockBackend::sequence(vec!["[[A]]".into()]).into_endpoint();
        let req = ChatRequest::user("judge this", 0.0, 1.0, 64);
        assert_eq!(ep.complete(&req).unwrap(), "[[A]]");
    }

    #[test]
    fn batch_preserves_keys_and_isolates_errors() {
        let mock = MockBackend::new().with_rule(|req: &ChatRequest| {
            if req.last_user_content().contains("fail") {
                None
            } else {
                Some("ok".to_string())
            }
        });
        let ep = mock.into_endpoint();
        let reqs = vec![
            ("k1".to_string(), ChatRequest::user("a", 0.0, 1.0, 8)),
            ("k2".to_string(), ChatRequest::user("fail", 0.0, 1.0, 8)),
            ("k3".to_string(), ChatRequest::user("c", 0.0, 1.0, 8)),
        ];
        let results = ep.complete_batch(reqs).unwrap();
        let keys: Vec<_> = results.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["k1", "k2", "k3"]);
        assert!(results[0].1.is_ok());
        assert!(matches!(results[1].1, Err(ClientError::ScriptMiss { .. })));
        assert!(results[2].1.is_ok());
    }

    #[test]
    fn duplicate_batch_keys_rejected() {
        let ep = MockBackend::sequence(vec!["x".into(); 2]).into_endpoint();
        let reqs = vec![
            ("k".to_string(), ChatRequest::user("a", 0.0, 1.0, 8)),
            ("k".to_string(), ChatRequest::user("b", 0.0, 1.0, 8)),
        ];
        assert!(matches!(
            ep.complete_batch(reqs),
            Err(ClientError::InvalidRequest(_))
        ));
    }

    #[test]
    fn retriable_error_reports_attempts() {
        let mock = MockBackend::new().failing();
        let mut config = EndpointConfig::new("mock://", "m");
        config.max_retries = 3;
        let ep = Endpoint::from_transport(config, Arc::new(mock))
            .with_retry_base(Duration::from_millis(1));
        let err = ep.complete(&ChatRequest::user("x", 0.0, 1.0, 8)).unwrap_err();
        match err {
            ClientError::Retriable { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("expected retriable, got {other}"),
        }
    }

    #[test]
    fn empty_completion_is_not_retried() {
        let mock = MockBackend::sequence(vec!["".into(), "later".into()]);
        let ep = mock.into_endpoint();
        assert!(matches!(
            ep.complete(&ChatRequest::user("x", 0.0, 1.0, 8)),
            Err(ClientError::EmptyCompletion)
        ));
        // second scripted entry still queued: empty output consumed one call only
        assert_eq!(ep.complete(&ChatRequest::user("x", 0.0, 1.0, 8)).unwrap(), "later");
    }

    #[test]
    fn request_without_user_message_invalid() {
        let ep = MockBackend::sequence(vec!["x".into()]).into_endpoint();
        let req = ChatRequest {
            messages: vec![Message {
                role: Role::System,
                content: "only system".into(),
            }],
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 8,
            seed: None,
        };
        assert!(matches!(
            ep.complete(&req),
            Err(ClientError::InvalidRequest(_))
        ));
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traffic.jsonl");
        let req = ChatRequest::user("hello", 0.2, 0.9, 16).with_seed(7);
        {
            let ep = MockBackend::sequence(vec!["recorded".into()])
                .into_endpoint()
                .with_recording(path.clone());
            assert_eq!(ep.complete(&req).unwrap(), "recorded");
            ep.save_recording().unwrap();
        }
        let ep = Endpoint::replay(EndpointConfig::new("replay://", "m"), &path).unwrap();
        assert_eq!(ep.complete(&req).unwrap(), "recorded");
        let miss = ChatRequest::user("other", 0.2, 0.9, 16);
        assert!(matches!(
            ep.complete(&miss),
            Err(ClientError::ScriptMiss { .. })
        ));
    }
}
