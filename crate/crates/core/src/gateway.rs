//! Provider-agnostic chat-completion client with retries, per-backend
//! concurrency limits, content-addressed caching, and record/replay.
//!
//! Modes:
//! * `Live` — always calls the backend, never touches the cache.
//! * `Record` — cache-through: hits are served from disk, misses are sent
//!   to the backend and persisted, so interrupted runs resume for free.
//! * `Replay` — cache-only; performs zero network operations and fails
//!   with [`GatewayError::ReplayMiss`] on unseen requests.
//!
//! Cache entries live at `cache/{first 2 hex}/{digest}.json` where the
//! digest is the SHA-256 of the request's canonical serialization. Files
//! are written to a temp name and renamed, so a crashed run never leaves a
//! truncated entry that replay would accept. Credentials come from the
//! `{BACKEND_ID}_API_KEY` environment variable at send time and are never
//! serialized.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Message author in a chat exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::User,
            content: content.into(),
        }
    }
}

/// One chat-completion call. Field order is the canonical serialization
/// order used for cache keys; `request_tag` is free-form provenance (run
/// stage, case, repetition index) and deliberately part of the key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub backend_id: String,
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub request_tag: String,
}

impl CompletionRequest {
    fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages must be non-empty".into()));
        }
        if self.messages[0].role == ChatRole::Assistant {
            return Err(GatewayError::InvalidRequest(
                "first message role must be system or user".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: String,
    pub latency_ms: u64,
    pub from_cache: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

/// SHA-256 hex digest of the canonical request serialization. Equal
/// requests yield equal keys; any field change (including `temperature:
/// null` vs `0.0` and message order) changes the key.
pub fn cache_key(request: &CompletionRequest) -> String {
    let canonical = serde_json::to_vec(request).expect("request serialization cannot fail");
    hex::encode(Sha256::digest(&canonical))
}

/// Static description of one backend endpoint. `base_url` is the full
/// chat-completions URL; `headers` are extra non-secret headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend_id: String,
    pub base_url: String,
    pub model_id: String,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
}

impl BackendConfig {
    /// Environment variable holding this backend's credential:
    /// `{BACKEND_ID}_API_KEY`, uppercased, `-` mapped to `_`.
    pub fn api_key_var(&self) -> String {
        format!(
            "{}_API_KEY",
            self.backend_id.to_uppercase().replace('-', "_")
        )
    }
}

/// Exponential backoff schedule for transient failures.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    fn delay_for_attempt(&self, attempt: u32, hint: Option<Duration>) -> Duration {
        const CAP: Duration = Duration::from_secs(60);
        // A server retry-after hint takes precedence over the computed
        // backoff for this attempt.
        let delay = hint.unwrap_or_else(|| {
            self.base_delay
                .mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
        });
        delay.min(CAP)
    }
}

/// Raw reply from a transport, before chat-shape parsing.
#[derive(Debug, Clone)]
pub struct TransportReply {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<Duration>,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
}

/// Sends one chat request to a backend. Implementations must be safe to
/// call from multiple worker threads.
pub trait Transport: Send + Sync {
    fn send_chat(
        &self,
        backend: &BackendConfig,
        api_key: Option<&str>,
        request: &CompletionRequest,
    ) -> Result<TransportReply, TransportError>;
}

/// HTTP transport speaking the chat-completions JSON shape.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        HttpTransport {
            agent: config.into(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for HttpTransport {
    fn send_chat(
        &self,
        backend: &BackendConfig,
        api_key: Option<&str>,
        request: &CompletionRequest,
    ) -> Result<TransportReply, TransportError> {
        let body = serde_json::json!({
            "model": backend.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut builder = self.agent.post(&backend.base_url);
        for (name, value) in &backend.headers {
            builder = builder.header(name.as_str(), value.as_str());
        }
        if let Some(key) = api_key {
            builder = builder.header("authorization", &format!("Bearer {key}"));
        }
        let response = builder.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Network(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let body = response
            .into_body()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(TransportReply {
            status,
            body,
            retry_after,
        })
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("replay miss for cache key {0}")]
    ReplayMiss(String),
    #[error("backend error (status {status}): {body}")]
    BackendError { status: u16, body: String },
    #[error("request timed out after retries")]
    Timeout,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no configured backend with id {0:?}")]
    UnknownBackend(String),
    #[error("cache error: {0}")]
    Cache(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    request: CompletionRequest,
    result: CompletionResult,
    recorded_at: String,
}

/// Counting semaphore bounding in-flight requests per backend.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(self: &Arc<Self>) -> LimiterGuard {
        let mut count = self.in_flight.lock().unwrap();
        while *count >= self.max {
            count = self.freed.wait(count).unwrap();
        }
        *count += 1;
        LimiterGuard {
            limiter: Arc::clone(self),
        }
    }
}

struct LimiterGuard {
    limiter: Arc<Limiter>,
}

impl Drop for LimiterGuard {
    fn drop(&mut self) {
        let mut count = self.limiter.in_flight.lock().unwrap();
        *count -= 1;
        self.limiter.freed.notify_one();
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

pub struct Gateway {
    mode: GatewayMode,
    cache_dir: PathBuf,
    backends: BTreeMap<String, BackendConfig>,
    transports: BTreeMap<String, Arc<dyn Transport>>,
    default_transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    max_in_flight: usize,
    limiters: Mutex<BTreeMap<String, Arc<Limiter>>>,
    timestamp_override: Option<String>,
}

pub struct GatewayBuilder {
    gateway: Gateway,
}

impl GatewayBuilder {
    pub fn backend(mut self, config: BackendConfig) -> Self {
        self.gateway
            .backends
            .insert(config.backend_id.clone(), config);
        self
    }

    /// Registers a backend served by a custom transport (offline demo
    /// backend, test double) instead of HTTP.
    pub fn backend_with_transport(
        mut self,
        config: BackendConfig,
        transport: Arc<dyn Transport>,
    ) -> Self {
        self.gateway
            .transports
            .insert(config.backend_id.clone(), transport);
        self.gateway
            .backends
            .insert(config.backend_id.clone(), config);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.gateway.retry = retry;
        self
    }

    pub fn max_in_flight(mut self, n: usize) -> Self {
        self.gateway.max_in_flight = n.max(1);
        self
    }

    /// Fixes the `recorded_at` value written to cache entries; used when
    /// regenerating committed fixtures so reruns are byte-stable.
    pub fn timestamp_override(mut self, ts: impl Into<String>) -> Self {
        self.gateway.timestamp_override = Some(ts.into());
        self
    }

    pub fn build(self) -> Gateway {
        self.gateway
    }
}

impl Gateway {
    pub fn builder(mode: GatewayMode, cache_dir: impl Into<PathBuf>) -> GatewayBuilder {
        GatewayBuilder {
            gateway: Gateway {
                mode,
                cache_dir: cache_dir.into(),
                backends: BTreeMap::new(),
                transports: BTreeMap::new(),
                default_transport: Arc::new(HttpTransport::default()),
                retry: RetryPolicy::default(),
                max_in_flight: 4,
                limiters: Mutex::new(BTreeMap::new()),
                timestamp_override: None,
            },
        }
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn backend(&self, backend_id: &str) -> Option<&BackendConfig> {
        self.backends.get(backend_id)
    }

    pub fn cache_path(&self, key: &str) -> PathBuf {
        self.cache_dir.join(&key[..2]).join(format!("{key}.json"))
    }

    /// Resolves one completion according to the gateway mode.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        let key = cache_key(request);
        match self.mode {
            GatewayMode::Replay => match self.read_cache(&key)? {
                Some(mut result) => {
                    result.from_cache = true;
                    Ok(result)
                }
                None => Err(GatewayError::ReplayMiss(key)),
            },
            GatewayMode::Record => {
                if let Some(mut result) = self.read_cache(&key)? {
                    result.from_cache = true;
                    return Ok(result);
                }
                let result = self.call_backend(request)?;
                self.write_cache(&key, request, &result)?;
                Ok(result)
            }
            GatewayMode::Live => self.call_backend(request),
        }
    }

    fn call_backend(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let backend = self
            .backends
            .get(&request.backend_id)
            .ok_or_else(|| GatewayError::UnknownBackend(request.backend_id.clone()))?;
        let transport = self
            .transports
            .get(&request.backend_id)
            .unwrap_or(&self.default_transport)
            .clone();
        let api_key = std::env::var(backend.api_key_var()).ok();

        let limiter = {
            let mut limiters = self.limiters.lock().unwrap();
            Arc::clone(
                limiters
                    .entry(request.backend_id.clone())
                    .or_insert_with(|| Arc::new(Limiter::new(self.max_in_flight))),
            )
        };
        let _guard = limiter.acquire();

        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let outcome = transport.send_chat(backend, api_key.as_deref(), request);
            let latency_ms = started.elapsed().as_millis() as u64;
            match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return parse_chat_body(&reply.body, latency_ms, reply.status);
                }
                Ok(reply) if is_retryable_status(reply.status) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::BackendError {
                            status: reply.status,
                            body: reply.body,
                        });
                    }
                    std::thread::sleep(self.retry.delay_for_attempt(attempt, reply.retry_after));
                }
                Ok(reply) => {
                    return Err(GatewayError::BackendError {
                        status: reply.status,
                        body: reply.body,
                    });
                }
                Err(TransportError::Timeout) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::Timeout);
                    }
                    std::thread::sleep(self.retry.delay_for_attempt(attempt, None));
                }
                Err(TransportError::Network(message)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::BackendError {
                            status: 0,
                            body: message,
                        });
                    }
                    std::thread::sleep(self.retry.delay_for_attempt(attempt, None));
                }
            }
        }
    }

    fn read_cache(&self, key: &str) -> Result<Option<CompletionResult>, GatewayError> {
        let path = self.cache_path(key);
        match std::fs::read(&path) {
            Ok(bytes) => {
                let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|e| {
                    GatewayError::Cache(format!("corrupt cache entry {}: {e}", path.display()))
                })?;
                Ok(Some(entry.result))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(GatewayError::Cache(format!(
                "cannot read {}: {e}",
                path.display()
            ))),
        }
    }

    fn write_cache(
        &self,
        key: &str,
        request: &CompletionRequest,
        result: &CompletionResult,
    ) -> Result<(), GatewayError> {
        let path = self.cache_path(key);
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir)
            .map_err(|e| GatewayError::Cache(format!("cannot create {}: {e}", dir.display())))?;
        let entry = CacheEntry {
            request: request.clone(),
            result: CompletionResult {
                from_cache: false,
                ..result.clone()
            },
            recorded_at: self
                .timestamp_override
                .clone()
                .unwrap_or_else(|| chrono::Utc::now().to_rfc3339()),
        };
        let payload = serde_json::to_vec_pretty(&entry)
            .map_err(|e| GatewayError::Cache(e.to_string()))?;
        let tmp = dir.join(format!(
            ".tmp-{key}-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, &payload)
            .map_err(|e| GatewayError::Cache(format!("cannot write {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, &path)
            .map_err(|e| GatewayError::Cache(format!("cannot rename into {}: {e}", path.display())))
    }
}

fn is_retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

fn parse_chat_body(
    body: &str,
    latency_ms: u64,
    status: u16,
) -> Result<CompletionResult, GatewayError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|_| GatewayError::BackendError {
            status,
            body: format!("unparseable completion body: {body}"),
        })?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::BackendError {
            status,
            body: format!("completion body has no choices: {body}"),
        })?;
    let text = choice
        .pointer("/message/content")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    let finish_reason = choice
        .get("finish_reason")
        .and_then(|v| v.as_str())
        .unwrap_or("stop")
        .to_string();
    if text.is_empty() && finish_reason == "stop" {
        return Err(GatewayError::BackendError {
            status,
            body: "backend returned an empty completion with a normal finish reason".into(),
        });
    }
    Ok(CompletionResult {
        text,
        finish_reason,
        latency_ms,
        from_cache: false,
    })
}
