//! Chat-completion backends, retries and the response cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ActivitySet, ConsistencyVector, ContextSnapshot};
use crate::prompt::{format_activity_list, Prompt};
use crate::rules::RuleSet;

/// Environment variable holding the credential for HTTP backends.
pub const API_KEY_ENV: &str = "CONTEXTGPT_API_KEY";

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("request timed out")]
    Timeout,
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("authentication failed ({status}): {body}")]
    Authentication { status: u16, body: String },
    #[error("request rejected ({status}): {body}")]
    Rejected { status: u16, body: String },
}

impl TransportError {
    /// Whether the same request may succeed if sent again.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            Self::Connection(_) | Self::Timeout | Self::Server { .. }
        )
    }

    fn from_status(status: u16, body: String) -> Self {
        match status {
            401 | 403 => Self::Authentication { status, body },
            408 | 429 | 500..=599 => Self::Server { status, body },
            _ => Self::Rejected { status, body },
        }
    }
}

impl From<reqwest::Error> for TransportError {
    fn from(err: reqwest::Error) -> Self {
        if err.is_timeout() {
            Self::Timeout
        } else if let Some(status) = err.status() {
            Self::from_status(status.as_u16(), err.to_string())
        } else {
            Self::Connection(err.to_string())
        }
    }
}

/// Exponential backoff for transient transport failures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    pub fn delay_for(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay)
    }

    /// Runs `op`, retrying transient failures up to `max_retries` times.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<T, TransportError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(err) if err.is_transient() && attempt < self.max_retries => {
                    log::warn!("transient failure (attempt {}): {err}", attempt + 1);
                    std::thread::sleep(self.delay_for(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding concurrent outbound requests.
#[derive(Debug)]
pub struct Throttle {
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct ThrottlePermit<'a>(&'a Throttle);

impl Throttle {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> ThrottlePermit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        ThrottlePermit(self)
    }
}

impl Drop for ThrottlePermit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Endpoint, credential and timeout shared by the HTTP backend and embedder.
#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            timeout: Duration::from_secs(60),
        }
    }

    pub(crate) fn client(&self) -> Result<reqwest::blocking::Client, TransportError> {
        reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(TransportError::from)
    }

    pub(crate) fn post_json<B: Serialize>(
        &self,
        client: &reqwest::blocking::Client,
        body: &B,
    ) -> Result<String, TransportError> {
        let mut request = client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send()?;
        let status = response.status().as_u16();
        let text = response.text()?;
        if (200..300).contains(&status) {
            Ok(text)
        } else {
            Err(TransportError::from_status(status, text))
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("provider refused the request: {0}")]
    Refusal(String),
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("temperature must be non-negative, got {0}")]
    InvalidTemperature(f64),
    #[error("no context registered under canonical key `{0}`")]
    UnknownContext(String),
    #[error("cache store {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetadata {
    pub canonical_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: Prompt,
    pub temperature: f64,
    pub model: String,
    pub metadata: RequestMetadata,
}

impl CompletionRequest {
    /// A request at temperature 0.
    pub fn new(prompt: Prompt, model: impl Into<String>, canonical_key: impl Into<String>) -> Self {
        Self {
            prompt,
            temperature: 0.0,
            model: model.into(),
            metadata: RequestMetadata {
                canonical_key: canonical_key.into(),
            },
        }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(req)
    }
}

/// Sends `req` to `backend` and returns the first completion's text.
pub fn complete(req: &CompletionRequest, backend: &dyn Backend) -> Result<String, GatewayError> {
    if req.temperature.is_nan() || req.temperature < 0.0 {
        return Err(GatewayError::InvalidTemperature(req.temperature));
    }
    backend.complete(req)
}

/// Chat-completions over HTTP: `{model, temperature, messages}` in,
/// `{choices: [{message: {content}}]}` out.
pub struct HttpBackend {
    settings: HttpSettings,
    retry: RetryPolicy,
    throttle: Throttle,
    client: reqwest::blocking::Client,
    id: String,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: &'a [crate::prompt::Message],
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    refusal: Option<String>,
}

impl HttpBackend {
    pub fn new(
        settings: HttpSettings,
        model: &str,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Result<Self, TransportError> {
        let client = settings.client()?;
        Ok(Self {
            id: format!("http:{model}"),
            settings,
            retry,
            throttle: Throttle::new(max_in_flight),
            client,
        })
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        let body = ChatRequest {
            model: &req.model,
            temperature: req.temperature,
            messages: &req.prompt.messages,
        };
        let raw = {
            let _permit = self.throttle.acquire();
            self.retry
                .run(|| self.settings.post_json(&self.client, &body))?
        };
        let parsed: ChatResponse =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Malformed(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Malformed("response has no choices".into()))?;
        if let Some(refusal) = choice.message.refusal {
            return Err(GatewayError::Refusal(refusal));
        }
        if choice.finish_reason.as_deref() == Some("content_filter") {
            return Err(GatewayError::Refusal("content filter".into()));
        }
        choice
            .message
            .content
            .ok_or_else(|| GatewayError::Malformed("choice has no content".into()))
    }
}

/// Canonical key → snapshot lookup shared between the pipeline and the mock
/// backend.
#[derive(Debug, Clone, Default)]
pub struct ContextRegistry(Arc<RwLock<HashMap<String, ContextSnapshot>>>);

impl ContextRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, snap: &ContextSnapshot) -> String {
        let key = snap.canonical_key();
        let mut anonymous = snap.clone();
        anonymous.user = None;
        self.0
            .write()
            .unwrap()
            .entry(key.clone())
            .or_insert(anonymous);
        key
    }

    pub fn get(&self, key: &str) -> Option<ContextSnapshot> {
        self.0.read().unwrap().get(key).cloned()
    }
}

/// Offline backend answering from a rule set. The prompt text is ignored;
/// the context comes from the registry entry named by the request's
/// canonical key.
pub struct MockBackend {
    rules: RuleSet,
    activities: ActivitySet,
    registry: ContextRegistry,
}

impl MockBackend {
    pub fn new(rules: RuleSet, activities: ActivitySet, registry: ContextRegistry) -> Self {
        Self {
            rules,
            activities,
            registry,
        }
    }

    pub fn registry(&self) -> &ContextRegistry {
        &self.registry
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        let key = &req.metadata.canonical_key;
        let snap = self
            .registry
            .get(key)
            .ok_or_else(|| GatewayError::UnknownContext(key.clone()))?;
        let consistent = self.rules.evaluate(&self.activities, &snap);
        let excluded: Vec<&str> = self
            .activities
            .names()
            .iter()
            .filter(|n| !consistent.contains(n))
            .map(String::as_str)
            .collect();
        let reasoning = if excluded.is_empty() {
            "no known constraint rules out any activity in this context".to_string()
        } else {
            format!(
                "the context rules out {}; everything else stays possible",
                excluded.join(", ")
            )
        };
        Ok(format!(
            "Reasoning: {reasoning}.\nConsistent activities: {}",
            format_activity_list(&consistent)
        ))
    }
}

/// Counts calls reaching the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: std::sync::atomic::AtomicUsize,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: Default::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.complete(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub canonical_key: String,
    pub k: f64,
    pub backend_id: String,
    pub response: String,
    pub vector: Option<ConsistencyVector>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey(String, u64, String);

impl CacheKey {
    fn new(canonical_key: &str, k: f64, backend_id: &str) -> Self {
        // 0.0 and -0.0 are the same threshold
        let k = if k == 0.0 { 0.0 } else { k };
        Self(
            canonical_key.to_string(),
            k.to_bits(),
            backend_id.to_string(),
        )
    }
}

/// Completion cache keyed by (canonical key, k, backend id), optionally
/// backed by an append-only JSONL file.
#[derive(Debug, Default)]
pub struct CacheStore {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<CacheKey, CacheEntry>>,
    file: Mutex<Option<File>>,
    key_locks: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
}

impl CacheStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a JSONL store. Unparseable lines, such as a
    /// truncated final line, are skipped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| GatewayError::Cache {
            path: path.display().to_string(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(entry) => {
                        let key = CacheKey::new(&entry.canonical_key, entry.k, &entry.backend_id);
                        entries.insert(key, entry);
                    }
                    Err(e) => log::warn!("{}:{}: skipping cache line: {e}", path.display(), n + 1),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            file: Mutex::new(Some(file)),
            key_locks: Mutex::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, canonical_key: &str, k: f64, backend_id: &str) -> Option<CacheEntry> {
        self.entries
            .read()
            .unwrap()
            .get(&CacheKey::new(canonical_key, k, backend_id))
            .cloned()
    }

    pub fn insert(&self, entry: CacheEntry) -> Result<(), GatewayError> {
        if let Some(file) = self.file.lock().unwrap().as_mut() {
            let mut line = serde_json::to_string(&entry).expect("cache entry serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| self.io_error(source))?;
        }
        let key = CacheKey::new(&entry.canonical_key, entry.k, &entry.backend_id);
        self.entries.write().unwrap().insert(key, entry);
        Ok(())
    }

    /// Drops every entry, truncating the backing file.
    pub fn clear(&self) -> Result<(), GatewayError> {
        let mut file = self.file.lock().unwrap();
        if let Some(path) = &self.path {
            *file = Some(File::create(path).map_err(|source| self.io_error(source))?);
            *file = Some(
                OpenOptions::new()
                    .append(true)
                    .open(path)
                    .map_err(|source| self.io_error(source))?,
            );
        }
        self.entries.write().unwrap().clear();
        Ok(())
    }

    fn io_error(&self, source: std::io::Error) -> GatewayError {
        let path = self
            .path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        GatewayError::Cache { path, source }
    }

    fn key_lock(&self, key: &CacheKey) -> Arc<Mutex<()>> {
        self.key_locks
            .lock()
            .unwrap()
            .entry(key.clone())
            .or_default()
            .clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedCompletion {
    pub response: String,
    pub cache_hit: bool,
}

/// Returns the stored response for `(canonical key, k, backend)` if there is
/// one; otherwise calls the backend once and stores the result.
pub fn cached_complete(
    req: &CompletionRequest,
    k: f64,
    backend: &dyn Backend,
    store: &CacheStore,
) -> Result<CachedCompletion, GatewayError> {
    cached_complete_with(req, k, backend, store, |_| None)
}

/// Like [`cached_complete`], storing `extract(response)` as the entry's
/// vector on a miss.
pub fn cached_complete_with(
    req: &CompletionRequest,
    k: f64,
    backend: &dyn Backend,
    store: &CacheStore,
    extract: impl FnOnce(&str) -> Option<ConsistencyVector>,
) -> Result<CachedCompletion, GatewayError> {
    let key = CacheKey::new(&req.metadata.canonical_key, k, backend.id());
    let lock = store.key_lock(&key);
    let _guard = lock.lock().unwrap();
    if let Some(entry) = store.get(&req.metadata.canonical_key, k, backend.id()) {
        return Ok(CachedCompletion {
            response: entry.response,
            cache_hit: true,
        });
    }
    let response = complete(req, backend)?;
    store.insert(CacheEntry {
        canonical_key: req.metadata.canonical_key.clone(),
        k,
        backend_id: backend.id().to_string(),
        vector: extract(&response),
        response: response.clone(),
        timestamp: Utc::now(),
    })?;
    Ok(CachedCompletion {
        response,
        cache_hit: false,
    })
}
