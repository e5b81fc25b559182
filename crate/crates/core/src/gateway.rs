//! Chat-completion backends.
//!
//! Two backends share the [`ChatBackend`] trait: [`RemoteBackend`] speaks the
//! OpenAI-compatible `/chat/completions` dialect over HTTP, and
//! [`ScriptedBackend`] replays fixture replies keyed by the request's user
//! content. [`Gateway`] layers a concurrency limit, retries with exponential
//! backoff, and an append-only JSON-lines run log on top of either.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_CONCURRENCY: usize = 8;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("credential environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("rate limited (HTTP 429)")]
    RateLimited,
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed completion response: {0}")]
    BadResponse(String),
    #[error("no scripted reply for request (user digest {digest})")]
    ScriptMiss { digest: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<GatewayError>,
    },
}

impl GatewayError {
    /// Transport failures, timeouts, and 429s are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport(_) | GatewayError::Timeout(_) | GatewayError::RateLimited
        )
    }

    /// Short outcome tag for the run log; never includes response bodies.
    pub fn kind(&self) -> String {
        match self {
            GatewayError::InvalidRequest(_) => "invalid_request".into(),
            GatewayError::MissingCredential(_) => "missing_credential".into(),
            GatewayError::Transport(_) => "transport".into(),
            GatewayError::Timeout(_) => "timeout".into(),
            GatewayError::Auth(code) => format!("auth_{code}"),
            GatewayError::RateLimited => "rate_limited".into(),
            GatewayError::Status { code, .. } => format!("status_{code}"),
            GatewayError::BadResponse(_) => "bad_response".into(),
            GatewayError::ScriptMiss { .. } => "script_miss".into(),
            GatewayError::Exhausted { .. } => "exhausted".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

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

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Opaque id for the run log; not sent over the wire.
    pub request_tag: String,
    /// Case the call belongs to, for per-case timing; not sent over the wire.
    pub case_id: Option<String>,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            request_tag: String::new(),
            case_id: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn tag(mut self, tag: impl Into<String>) -> Self {
        self.request_tag = tag.into();
        self
    }

    pub fn case(mut self, case_id: impl Into<String>) -> Self {
        self.case_id = Some(case_id.into());
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        match self.messages.first() {
            None => Err(GatewayError::InvalidRequest("no messages".into())),
            Some(m) if m.role == Role::Assistant => Err(GatewayError::InvalidRequest(
                "first message must be system or user".into(),
            )),
            Some(_) => Ok(()),
        }
    }

    /// All user-role content, joined by newlines.
    pub fn user_content(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Hex SHA-256 of [`Self::user_content`].
    pub fn user_digest(&self) -> String {
        sha256_hex(self.user_content().as_bytes())
    }

    /// Hex SHA-256 of the wire payload.
    pub fn digest(&self) -> String {
        sha256_hex(wire_payload(self).to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The JSON body sent to `/chat/completions`.
pub fn wire_payload(req: &ChatRequest) -> serde_json::Value {
    serde_json::json!({
        "model": req.model_id,
        "messages": req.messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub token_usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatCompletion {
    pub text: String,
    pub latency_ms: u64,
    pub token_usage: Option<TokenUsage>,
    pub backend_id: String,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    /// Issues exactly one call.
    async fn call(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError>;
}

/// One call against `backend`, with wall-clock latency.
pub async fn complete(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
) -> Result<ChatCompletion, GatewayError> {
    request.validate()?;
    let start = Instant::now();
    let reply = backend.call(request).await?;
    Ok(ChatCompletion {
        text: reply.text,
        latency_ms: start.elapsed().as_millis() as u64,
        token_usage: reply.token_usage,
        backend_id: backend.backend_id().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (0-based `attempt` just failed).
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay)
    }
}

/// Calls `backend` until success, a non-retryable error, or `max_attempts`.
/// Latency on success covers every attempt and backoff.
pub async fn with_retry(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<ChatCompletion, GatewayError> {
    let start = Instant::now();
    let mut attempt = 0;
    loop {
        match complete(backend, request).await {
            Ok(mut done) => {
                done.latency_ms = start.elapsed().as_millis() as u64;
                return Ok(done);
            }
            Err(e) if !e.is_retryable() => return Err(e),
            Err(e) => {
                attempt += 1;
                if attempt >= policy.max_attempts.max(1) {
                    return Err(GatewayError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    });
                }
                tokio::time::sleep(policy.backoff(attempt - 1)).await;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key_env: String,
    pub timeout: Duration,
}

/// OpenAI-compatible HTTP backend. The bearer token is read from the
/// environment once and never printed.
pub struct RemoteBackend {
    client: reqwest::Client,
    endpoint: String,
    api_key: String,
    timeout: Duration,
    id: String,
}

impl fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.endpoint)
            .field("api_key", &"<redacted>")
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl RemoteBackend {
    pub fn from_env(config: &RemoteConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| GatewayError::MissingCredential(config.api_key_env.clone()))?;
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: &RemoteConfig, api_key: String) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
            timeout: config.timeout,
            id: "remote".into(),
        })
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[async_trait]
impl ChatBackend for RemoteBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    async fn call(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                GatewayError::Timeout(self.timeout)
            } else {
                // reqwest errors carry the URL but never headers.
                GatewayError::Transport(e.without_url().to_string())
            }
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&wire_payload(request))
            .send()
            .await
            .map_err(classify)?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::Auth(status)),
            429 => return Err(GatewayError::RateLimited),
            _ => {
                let mut body = resp.text().await.unwrap_or_default();
                body.truncate(512);
                return Err(GatewayError::Status { code: status, body });
            }
        }
        let body: WireResponse = resp.json().await.map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(self.timeout)
            } else {
                GatewayError::BadResponse(e.without_url().to_string())
            }
        })?;
        let text = body
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::BadResponse("no choices".into()))?;
        Ok(BackendReply {
            text,
            token_usage: body.usage.map(|u| TokenUsage {
                prompt: u.prompt_tokens,
                completion: u.completion_tokens,
            }),
        })
    }
}

/// One fixture entry. `match` is either `sha256:<hex>` (digest of the user
/// content, exact) or a plain prefix of the user content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: String,
    pub reply: String,
}

/// Replays fixture replies. Entries sharing a `match` key are served in file
/// order; the last one repeats once the others are used up. Digest entries
/// take precedence over prefix entries, and among prefixes the first listed
/// wins.
pub struct ScriptedBackend {
    keys: Vec<String>,
    replies: HashMap<String, Vec<String>>,
    cursors: Mutex<HashMap<String, usize>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let mut keys = Vec::new();
        let mut replies: HashMap<String, Vec<String>> = HashMap::new();
        for e in entries {
            if !replies.contains_key(&e.matcher) {
                keys.push(e.matcher.clone());
            }
            replies.entry(e.matcher).or_default().push(e.reply);
        }
        // Stable: digests first, then prefixes in file order.
        keys.sort_by_key(|k| !k.starts_with("sha256:"));
        Self {
            keys,
            replies,
            cursors: Mutex::new(HashMap::new()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn from_json(raw: &[u8]) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_slice(raw)?))
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("poisoned").clone()
    }

    fn lookup(&self, request: &ChatRequest) -> Option<&str> {
        let content = request.user_content();
        let digest = format!("sha256:{}", sha256_hex(content.as_bytes()));
        self.keys
            .iter()
            .find(|k| {
                if k.starts_with("sha256:") {
                    **k == digest
                } else {
                    content.starts_with(k.as_str())
                }
            })
            .map(String::as_str)
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        "scripted"
    }

    async fn call(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        self.seen.lock().expect("poisoned").push(request.clone());
        let key = self.lookup(request).ok_or_else(|| GatewayError::ScriptMiss {
            digest: request.user_digest(),
        })?;
        let replies = &self.replies[key];
        let mut cursors = self.cursors.lock().expect("poisoned");
        let cursor = cursors.entry(key.to_string()).or_insert(0);
        let text = replies[(*cursor).min(replies.len() - 1)].clone();
        *cursor += 1;
        Ok(BackendReply {
            text,
            token_usage: None,
        })
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Call {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        case_id: Option<String>,
        request_tag: String,
        request_digest: String,
        backend_id: String,
        model_id: String,
        attempt: u32,
        latency_ms: u64,
        outcome: String,
    },
    /// Time spent on a case outside backend calls.
    Case { case_id: String, local_ms: u64 },
}

enum Sink {
    Memory,
    File(BufWriter<File>),
}

/// Append-only JSON-lines journal.
pub struct RunLog {
    sink: Mutex<(Sink, Vec<LogRecord>)>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self {
            sink: Mutex::new((Sink::Memory, Vec::new())),
        }
    }

    pub fn append_to(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            sink: Mutex::new((Sink::File(BufWriter::new(file)), Vec::new())),
        })
    }

    pub fn record(&self, rec: LogRecord) {
        let mut guard = self.sink.lock().expect("poisoned");
        if let Sink::File(w) = &mut guard.0 {
            let line = serde_json::to_string(&rec).expect("log record serializes");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                tracing::warn!("run log write failed: {e}");
            }
        }
        guard.1.push(rec);
    }

    pub fn records(&self) -> Vec<LogRecord> {
        self.sink.lock().expect("poisoned").1.clone()
    }
}

pub fn read_run_log(raw: &str) -> Result<Vec<LogRecord>, serde_json::Error> {
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// A shareable backend handle with a concurrency limit, retries, and journaling.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    limiter: Arc<Semaphore>,
    retry: RetryPolicy,
    log: Option<Arc<RunLog>>,
    scope: Option<String>,
    spent_ms: Arc<AtomicU64>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            limiter: Arc::new(Semaphore::new(DEFAULT_CONCURRENCY)),
            retry: RetryPolicy::default(),
            log: None,
            scope: None,
            spent_ms: Arc::new(AtomicU64::new(0)),
        }
    }

    /// A handle sharing backend, limiter and log whose calls are journaled
    /// under `case_id` and whose latency is tallied separately.
    pub fn scoped(&self, case_id: impl Into<String>) -> Self {
        Self {
            scope: Some(case_id.into()),
            spent_ms: Arc::new(AtomicU64::new(0)),
            ..self.clone()
        }
    }

    /// Backend latency of every attempt made through this handle.
    pub fn spent_ms(&self) -> u64 {
        self.spent_ms.load(Ordering::Relaxed)
    }

    pub fn concurrency(mut self, limit: usize) -> Self {
        self.limiter = Arc::new(Semaphore::new(limit.max(1)));
        self
    }

    pub fn retry(mut self, policy: RetryPolicy) -> Self {
        self.retry = policy;
        self
    }

    pub fn log(mut self, log: Arc<RunLog>) -> Self {
        self.log = Some(log);
        self
    }

    pub fn run_log(&self) -> Option<&Arc<RunLog>> {
        self.log.as_ref()
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    /// Retrying, journaled, rate-limited completion.
    pub async fn chat(&self, request: &ChatRequest) -> Result<ChatCompletion, GatewayError> {
        let start = Instant::now();
        let digest = request.digest();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire().await.expect("semaphore closed");
                let t0 = Instant::now();
                let r = complete(self.backend.as_ref(), request).await;
                (r, t0.elapsed().as_millis() as u64)
            };
            let (result, latency_ms) = result;
            self.spent_ms.fetch_add(latency_ms, Ordering::Relaxed);
            if let Some(log) = &self.log {
                log.record(LogRecord::Call {
                    case_id: self.scope.clone().or_else(|| request.case_id.clone()),
                    request_tag: request.request_tag.clone(),
                    request_digest: digest.clone(),
                    backend_id: self.backend.backend_id().to_string(),
                    model_id: request.model_id.clone(),
                    attempt,
                    latency_ms,
                    outcome: match &result {
                        Ok(_) => "ok".into(),
                        Err(e) => e.kind(),
                    },
                });
            }
            match result {
                Ok(mut done) => {
                    done.latency_ms = start.elapsed().as_millis() as u64;
                    return Ok(done);
                }
                Err(e) if !e.is_retryable() => return Err(e),
                Err(e) if attempt >= self.retry.max_attempts.max(1) => {
                    return Err(GatewayError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(_) => tokio::time::sleep(self.retry.backoff(attempt - 1)).await,
            }
        }
    }
}
