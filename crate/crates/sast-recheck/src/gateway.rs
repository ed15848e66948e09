//! Uniform chat-completion interface: live HTTP endpoints, a deterministic
//! mock, and a record/replay cache with retry and rate-limit handling.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub model_id: String,
    /// Chat-completions base URL, or "mock:" for the built-in deterministic
    /// mock transport.
    pub base_url: String,
    /// Name of the environment variable holding the API key. The key value
    /// itself is read at call time and never serialized.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    /// When false, the system text is prepended to the user message.
    #[serde(default = "default_true")]
    pub supports_system_message: bool,
}

fn default_max_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_true() -> bool {
    true
}

impl ModelEndpoint {
    pub fn mock(model_id: &str) -> Self {
        ModelEndpoint {
            model_id: model_id.into(),
            base_url: "mock:".into(),
            auth_env: None,
            max_retries: 3,
            timeout_secs: 120,
            requests_per_minute: None,
            supports_system_message: true,
        }
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock:")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_message: String,
    pub user_message: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub model_id: String,
    pub latency: Duration,
    pub from_cache: bool,
    #[serde(default)]
    pub retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Network only; the cache is neither read nor written.
    Live,
    /// Read the cache first; on a miss, call the network and write the entry.
    Record,
    /// Cache only; a miss is an error.
    #[default]
    Replay,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempts: {message}")]
    Exhausted { attempts: u32, message: String },
    #[error("HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("replay cache miss for key {key}")]
    ReplayMiss { key: String },
    #[error("cache unusable: {0}")]
    Cache(String),
    #[error("endpoint misconfigured: {0}")]
    Config(String),
}

/// Deterministic hash over (model_id, system, user, temperature, run_index).
/// The run index distinguishes self-consistency repetitions so each of the
/// n runs is cached separately.
pub fn cache_key(model_id: &str, request: &CompletionRequest, run_index: u32) -> String {
    let mut hasher = Sha256::new();
    for part in [
        model_id,
        &request.system_message,
        &request.user_message,
        &format!("{:.4}", request.temperature),
        &run_index.to_string(),
    ] {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// One network (or mock) attempt; retry and caching live in [`Gateway`].
pub trait Transport: Send + Sync {
    fn send(&self, endpoint: &ModelEndpoint, request: &CompletionRequest) -> Result<String, GatewayError>;
}

/// Live chat-completions client (messages array, temperature, model).
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    content: Option<String>,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport { client: reqwest::blocking::Client::new() }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn send(&self, endpoint: &ModelEndpoint, request: &CompletionRequest) -> Result<String, GatewayError> {
        let prepended;
        let messages = if endpoint.supports_system_message {
            vec![
                WireMessage { role: "system", content: &request.system_message },
                WireMessage { role: "user", content: &request.user_message },
            ]
        } else {
            prepended = format!("{}\n\n{}", request.system_message, request.user_message);
            vec![WireMessage { role: "user", content: &prepended }]
        };
        let body = WireRequest {
            model: &endpoint.model_id,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let mut req = self
            .client
            .post(&url)
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .json(&body);
        if let Some(var) = &endpoint.auth_env {
            let key = std::env::var(var)
                .map_err(|_| GatewayError::Config(format!("auth env var {var} is not set")))?;
            req = req.bearer_auth(key);
        }
        debug!("POST {url} model={} temperature={}", endpoint.model_id, request.temperature);
        let response = req
            .send()
            .map_err(|e| GatewayError::Exhausted { attempts: 1, message: e.to_string() })?;
        let status = response.status().as_u16();
        if status != 200 {
            let message = response.text().unwrap_or_default();
            return Err(GatewayError::Http { status, message: truncate_for_log(&message) });
        }
        let parsed: WireResponse = response
            .json()
            .map_err(|e| GatewayError::Protocol(format!("malformed completion JSON: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| GatewayError::Protocol("empty completion".into()))
    }
}

fn truncate_for_log(text: &str) -> String {
    let mut s: String = text.chars().take(300).collect();
    if s.len() < text.len() {
        s.push_str("...");
    }
    s
}

/// Deterministic mock: the decision score is a pure function of the request,
/// so recorded corpora and replays are reproducible without a network.
pub struct DeterministicMock;

impl Transport for DeterministicMock {
    fn send(&self, endpoint: &ModelEndpoint, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut hasher = Sha256::new();
        hasher.update(endpoint.model_id.as_bytes());
        hasher.update(request.user_message.as_bytes());
        hasher.update(format!("{:.4}", request.temperature).as_bytes());
        let digest = hasher.finalize();
        let score = (u16::from_be_bytes([digest[0], digest[1]]) % 101) as f64 / 10.0;
        Ok(format!(
            "Explanation: \"Let's think step by step...\" Deterministic mock assessment by {}. Decision: {score:.1}",
            endpoint.model_id
        ))
    }
}

/// Scripted reply for tests: a completion text or an HTTP status to fail with.
#[derive(Debug, Clone)]
pub enum MockReply {
    Text(String),
    Status(u16),
}

/// Pops one scripted reply per call; errors when the script runs dry.
pub struct ScriptedTransport {
    script: Mutex<std::collections::VecDeque<MockReply>>,
}

impl ScriptedTransport {
    pub fn new(replies: impl IntoIterator<Item = MockReply>) -> Self {
        ScriptedTransport { script: Mutex::new(replies.into_iter().collect()) }
    }

    pub fn of_texts(texts: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self::new(texts.into_iter().map(|t| MockReply::Text(t.into())))
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, _endpoint: &ModelEndpoint, _request: &CompletionRequest) -> Result<String, GatewayError> {
        match self.script.lock().unwrap().pop_front() {
            Some(MockReply::Text(text)) => Ok(text),
            Some(MockReply::Status(status)) => {
                Err(GatewayError::Http { status, message: "scripted".into() })
            }
            None => Err(GatewayError::Protocol("scripted transport exhausted".into())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    model_id: String,
    run_index: u32,
    request: CompletionRequest,
    response_text: String,
}

/// Chat-completion front end: retry with exponential backoff, a global
/// per-endpoint rate cap, and the record/replay cache.
pub struct Gateway {
    transport: Box<dyn Transport>,
    mode: Mode,
    cache_dir: Option<PathBuf>,
    backoff_base: Duration,
    next_slot: Mutex<HashMap<String, Instant>>,
}

impl Gateway {
    pub fn new(transport: Box<dyn Transport>, mode: Mode, cache_dir: Option<PathBuf>) -> Self {
        Gateway {
            transport,
            mode,
            cache_dir,
            backoff_base: Duration::from_millis(500),
            next_slot: Mutex::new(HashMap::new()),
        }
    }

    /// Shortens retry sleeps; test use.
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn complete(
        &self,
        endpoint: &ModelEndpoint,
        request: &CompletionRequest,
        run_index: u32,
    ) -> Result<CompletionResponse, GatewayError> {
        let key = cache_key(&endpoint.model_id, request, run_index);
        let started = Instant::now();

        if self.mode != Mode::Live {
            if let Some(text) = self.cache_read(&key)? {
                return Ok(CompletionResponse {
                    text,
                    model_id: endpoint.model_id.clone(),
                    latency: started.elapsed(),
                    from_cache: true,
                    retries: 0,
                });
            }
            if self.mode == Mode::Replay {
                return Err(GatewayError::ReplayMiss { key });
            }
        }

        self.respect_rate_cap(endpoint);
        let (text, retries) = self.send_with_retry(endpoint, request)?;
        if self.mode == Mode::Record {
            self.cache_write(&key, endpoint, request, run_index, &text)?;
        }
        Ok(CompletionResponse {
            text,
            model_id: endpoint.model_id.clone(),
            latency: started.elapsed(),
            from_cache: false,
            retries,
        })
    }

    fn send_with_retry(
        &self,
        endpoint: &ModelEndpoint,
        request: &CompletionRequest,
    ) -> Result<(String, u32), GatewayError> {
        let mut attempt = 0u32;
        loop {
            match self.transport.send(endpoint, request) {
                Ok(text) if text.is_empty() => {
                    return Err(GatewayError::Protocol("empty completion".into()))
                }
                Ok(text) => return Ok((text, attempt)),
                Err(err) => {
                    let retryable = matches!(
                        &err,
                        GatewayError::Exhausted { .. }
                            | GatewayError::Http { status: 429, .. }
                            | GatewayError::Http { status: 500..=599, .. }
                    );
                    if !retryable || attempt >= endpoint.max_retries {
                        return Err(match err {
                            GatewayError::Exhausted { message, .. } => {
                                GatewayError::Exhausted { attempts: attempt + 1, message }
                            }
                            other => other,
                        });
                    }
                    let delay = self.backoff_base * 2u32.pow(attempt.min(8));
                    warn!(
                        "retryable failure from {} (attempt {}): {err}; backing off {delay:?}",
                        endpoint.model_id,
                        attempt + 1
                    );
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }

    fn respect_rate_cap(&self, endpoint: &ModelEndpoint) {
        let Some(rpm) = endpoint.requests_per_minute else { return };
        if rpm == 0 {
            return;
        }
        let interval = Duration::from_secs_f64(60.0 / rpm as f64);
        let wait = {
            let mut slots = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let slot = slots.entry(endpoint.model_id.clone()).or_insert(now);
            let at = (*slot).max(now);
            *slot = at + interval;
            at.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn cache_path(&self, key: &str) -> Result<PathBuf, GatewayError> {
        let dir = self
            .cache_dir
            .as_ref()
            .ok_or_else(|| GatewayError::Cache("no cache directory configured".into()))?;
        Ok(dir.join(format!("{key}.json")))
    }

    fn cache_read(&self, key: &str) -> Result<Option<String>, GatewayError> {
        let path = self.cache_path(key)?;
        match std::fs::read(&path) {
            Ok(bytes) => {
                let entry: CacheEntry = serde_json::from_slice(&bytes)
                    .map_err(|e| GatewayError::Cache(format!("corrupt entry {key}: {e}")))?;
                Ok(Some(entry.response_text))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(GatewayError::Cache(e.to_string())),
        }
    }

    fn cache_write(
        &self,
        key: &str,
        endpoint: &ModelEndpoint,
        request: &CompletionRequest,
        run_index: u32,
        text: &str,
    ) -> Result<(), GatewayError> {
        let path = self.cache_path(key)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        let entry = CacheEntry {
            key: key.into(),
            model_id: endpoint.model_id.clone(),
            run_index,
            request: request.clone(),
            response_text: text.into(),
        };
        // Write-then-rename so concurrent workers never observe a torn file.
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entry).expect("serializable"))
            .map_err(|e| GatewayError::Cache(e.to_string()))?;
        std::fs::rename(&tmp, &path).map_err(|e| GatewayError::Cache(e.to_string()))?;
        Ok(())
    }
}

/// Writes a cache entry directly; used to assemble replay corpora in tests
/// and fixtures without going through Record mode.
pub fn seed_cache_entry(
    cache_dir: &std::path::Path,
    model_id: &str,
    request: &CompletionRequest,
    run_index: u32,
    response_text: &str,
) -> std::io::Result<String> {
    let key = cache_key(model_id, request, run_index);
    let entry = CacheEntry {
        key: key.clone(),
        model_id: model_id.into(),
        run_index,
        request: request.clone(),
        response_text: response_text.into(),
    };
    std::fs::create_dir_all(cache_dir)?;
    std::fs::write(
        cache_dir.join(format!("{key}.json")),
        serde_json::to_vec_pretty(&entry).expect("serializable"),
    )?;
    Ok(key)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(user: &str, temperature: f64) -> CompletionRequest {
        CompletionRequest {
            system_message: "You are a software security expert.".into(),
            user_message: user.into(),
            temperature,
            max_output_tokens: 1024,
        }
    }

    #[test]
    fn cache_key_varies_with_inputs() {
        let base = request("analyze this", 0.0);
        let k0 = cache_key("gpt-4o", &base, 0);
        assert_eq!(k0, cache_key("gpt-4o", &base, 0));
        assert_ne!(k0, cache_key("gpt-4o", &base, 1));
        assert_ne!(k0, cache_key("phi-4", &base, 0));
        assert_ne!(k0, cache_key("gpt-4o", &request("analyze this", 0.7), 0));
    }

    #[test]
    fn scripted_response_passes_through() {
        let gateway = Gateway::new(
            Box::new(ScriptedTransport::of_texts(["Decision: 3.0"])),
            Mode::Live,
            None,
        );
        let response = gateway
            .complete(&ModelEndpoint::mock("m"), &request("hi", 0.0), 0)
            .unwrap();
        assert!(response.text.contains("Decision: 3.0"));
        assert!(!response.from_cache);
    }

    #[test]
    fn retries_on_429_then_succeeds() {
        let transport = ScriptedTransport::new([
            MockReply::Status(429),
            MockReply::Status(429),
            MockReply::Text("Decision: 5.0".into()),
        ]);
        let gateway = Gateway::new(Box::new(transport), Mode::Live, None)
            .with_backoff_base(Duration::from_millis(1));
        let response = gateway
            .complete(&ModelEndpoint::mock("m"), &request("hi", 0.0), 0)
            .unwrap();
        assert_eq!(response.retries, 2);
        assert_eq!(response.text, "Decision: 5.0");
    }

    #[test]
    fn auth_errors_do_not_retry() {
        let transport =
            ScriptedTransport::new([MockReply::Status(401), MockReply::Text("never".into())]);
        let gateway = Gateway::new(Box::new(transport), Mode::Live, None)
            .with_backoff_base(Duration::from_millis(1));
        let err = gateway
            .complete(&ModelEndpoint::mock("m"), &request("hi", 0.0), 0)
            .unwrap_err();
        assert!(matches!(err, GatewayError::Http { status: 401, .. }));
    }

    #[test]
    fn exhausted_retries_is_a_transport_error() {
        let transport = ScriptedTransport::new(std::iter::repeat_n(MockReply::Status(503), 10));
        let mut endpoint = ModelEndpoint::mock("m");
        endpoint.max_retries = 2;
        let gateway = Gateway::new(Box::new(transport), Mode::Live, None)
            .with_backoff_base(Duration::from_millis(1));
        let err = gateway.complete(&endpoint, &request("hi", 0.0), 0).unwrap_err();
        assert!(matches!(err, GatewayError::Http { status: 503, .. }));
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let req = request("assess", 0.0);
        let endpoint = ModelEndpoint::mock("m");

        let recorder = Gateway::new(
            Box::new(ScriptedTransport::of_texts(["Decision: 2.0"])),
            Mode::Record,
            Some(dir.path().into()),
        );
        let recorded = recorder.complete(&endpoint, &req, 0).unwrap();
        assert!(!recorded.from_cache);

        // Replay gets the identical text without touching the transport.
        let replayer = Gateway::new(
            Box::new(ScriptedTransport::of_texts(Vec::<String>::new())),
            Mode::Replay,
            Some(dir.path().into()),
        );
        let replayed = replayer.complete(&endpoint, &req, 0).unwrap();
        assert!(replayed.from_cache);
        assert_eq!(replayed.text, recorded.text);
    }

    #[test]
    fn replay_miss_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let gateway = Gateway::new(
            Box::new(DeterministicMock),
            Mode::Replay,
            Some(dir.path().into()),
        );
        let req = request("unseen", 0.0);
        let err = gateway.complete(&ModelEndpoint::mock("m"), &req, 0).unwrap_err();
        match err {
            GatewayError::ReplayMiss { key } => assert_eq!(key, cache_key("m", &req, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn live_mode_never_writes_cache() {
        let dir = tempfile::tempdir().unwrap();
        let gateway = Gateway::new(
            Box::new(DeterministicMock),
            Mode::Live,
            Some(dir.path().into()),
        );
        gateway
            .complete(&ModelEndpoint::mock("m"), &request("hi", 0.0), 0)
            .unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn deterministic_mock_is_stable_and_in_range() {
        let endpoint = ModelEndpoint::mock("m");
        let req = request("finding text", 0.0);
        let a = DeterministicMock.send(&endpoint, &req).unwrap();
        let b = DeterministicMock.send(&endpoint, &req).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("Decision: "));
    }
}
