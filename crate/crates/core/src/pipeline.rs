//! End-to-end flow: window ingestion, single-context probes and batch
//! consistency-vector generation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{
    names_from_vector, ConsistencyVector, ContextError, ContextSnapshot, ContextValue, Domain,
};
use crate::describe::{DescribeError, PhraseTable, Renderer};
use crate::embed::{EmbedError, Embedder, HashEmbedder, HttpEmbedder};
use crate::extract::{extract, Diagnostic, ExtractError, ExtractionPolicy, VectorRecord};
use crate::gateway::{
    cached_complete_with, Backend, CacheStore, CompletionRequest, ContextRegistry, GatewayError,
    HttpBackend, HttpSettings, MockBackend, RetryPolicy,
};
use crate::pool::{
    embed_pool, select_by_vector, similarities, EmbedOutcome, EmbeddedExample, EmbeddingStore,
    Example, PoolError, PoolStore, ScoredExample,
};
use crate::prompt::{
    assemble, build_system_message, estimate_length, ExampleTurn, Prompt, PromptError,
    SystemMessageTemplate, DEFAULT_PROMPT_BUDGET,
};
use crate::rules::{RuleSet, RulesError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Describe(#[from] DescribeError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error("duplicate window_id `{0}`")]
    DuplicateWindow(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One segmented window of a user's context data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window_id: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<DateTime<Utc>>,
    pub z: u32,
    pub context: BTreeMap<String, ContextValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl WindowRecord {
    pub fn snapshot(&self) -> ContextSnapshot {
        ContextSnapshot {
            user: Some(self.user.clone()),
            window_seconds: self.z,
            assignments: self.context.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub records: Vec<WindowRecord>,
    pub rejected: Vec<LineError>,
}

/// Parses a JSONL windows file. Malformed or invalid lines are rejected
/// individually; a repeated `window_id` fails the whole file.
pub fn ingest_windows(text: &str, domain: &Domain) -> Result<IngestReport, PipelineError> {
    let mut report = IngestReport::default();
    let mut ids = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let reject = |message: String| LineError {
            line: n + 1,
            message,
        };
        let record: WindowRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report.rejected.push(reject(e.to_string()));
                continue;
            }
        };
        if !ids.insert(record.window_id.clone()) {
            return Err(PipelineError::DuplicateWindow(record.window_id));
        }
        if let Err(e) = record.snapshot().checked_key(&domain.schema) {
            report.rejected.push(reject(e.to_string()));
            continue;
        }
        if let Some(label) = &record.label {
            if !domain.activities.contains(label) {
                report
                    .rejected
                    .push(reject(format!("unknown label `{label}`")));
                continue;
            }
        }
        report.records.push(record);
    }
    Ok(report)
}

pub fn load_windows(
    path: impl AsRef<Path>,
    domain: &Domain,
) -> Result<IngestReport, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ingest_windows(&text, domain)
}

/// Everything one context goes through before reaching the backend.
#[derive(Debug, Clone, Serialize)]
pub struct PreparedContext {
    pub canonical_key: String,
    pub description: String,
    pub selected: Vec<ScoredExample>,
    pub warnings: Vec<String>,
    pub prompt: Prompt,
    pub prompt_length: usize,
}

/// All intermediates of a single-context run.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    #[serde(flatten)]
    pub prepared: PreparedContext,
    pub k: f64,
    pub backend_id: String,
    pub raw_response: String,
    pub cache_hit: bool,
    pub vector: ConsistencyVector,
    pub consistent: Vec<String>,
    pub fallback: bool,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub k: f64,
    pub backend_id: String,
    pub windows: usize,
    pub unique_contexts: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub fallbacks: usize,
    pub failures: usize,
    pub examples_per_prompt_mean: f64,
    pub prompt_length_max: usize,
    pub oversized_prompts: usize,
    pub unknown_names: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub records: Vec<VectorRecord>,
    pub summary: RunSummary,
}

impl BatchOutput {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone)]
struct ContextOutcome {
    vector: ConsistencyVector,
    cache_hit: bool,
    backend_called: bool,
    fallback: bool,
    failed: bool,
    diagnostics: Vec<Diagnostic>,
    examples: usize,
    prompt_length: usize,
}

/// The assembled pipeline. Shareable across threads; pool edits made
/// through [`pool`](Self::pool) are seen by the next request.
pub struct Pipeline {
    domain: Domain,
    renderer: Renderer,
    system_message: String,
    pool: PoolStore,
    embeddings: EmbeddingStore,
    embedder: Box<dyn Embedder>,
    backend: Box<dyn Backend>,
    cache: CacheStore,
    registry: ContextRegistry,
    policy: ExtractionPolicy,
    model: String,
    temperature: f64,
    prompt_budget: usize,
}

impl Pipeline {
    pub fn new(
        domain: Domain,
        table: PhraseTable,
        template: &SystemMessageTemplate,
        pool: PoolStore,
        embedder: Box<dyn Embedder>,
        backend: Box<dyn Backend>,
        registry: ContextRegistry,
    ) -> Result<Self, PipelineError> {
        let renderer = Renderer::new(domain.schema.clone(), table)?;
        let system_message = build_system_message(template, &domain.activities)?;
        Ok(Self {
            domain,
            renderer,
            system_message,
            pool,
            embeddings: EmbeddingStore::in_memory(),
            embedder,
            backend,
            cache: CacheStore::in_memory(),
            registry,
            policy: ExtractionPolicy::default(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            prompt_budget: DEFAULT_PROMPT_BUDGET,
        })
    }

    /// Offline pipeline over a rule-driven mock backend and the hash embedder.
    pub fn mock(
        domain: Domain,
        table: PhraseTable,
        template: &SystemMessageTemplate,
        pool: PoolStore,
        rules: RuleSet,
    ) -> Result<Self, PipelineError> {
        let registry = ContextRegistry::new();
        let backend = MockBackend::new(rules, domain.activities.clone(), registry.clone());
        Self::new(
            domain,
            table,
            template,
            pool,
            Box::new(HashEmbedder::default()),
            Box::new(backend),
            registry,
        )
    }

    pub fn with_cache(mut self, cache: CacheStore) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_embedding_store(mut self, store: EmbeddingStore) -> Self {
        self.embeddings = store;
        self
    }

    pub fn with_policy(mut self, policy: ExtractionPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_model(mut self, model: impl Into<String>, temperature: f64) -> Self {
        self.model = model.into();
        self.temperature = temperature;
        self
    }

    pub fn with_prompt_budget(mut self, budget: usize) -> Self {
        self.prompt_budget = budget;
        self
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn pool(&self) -> &PoolStore {
        &self.pool
    }

    pub fn cache(&self) -> &CacheStore {
        &self.cache
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn system_message(&self) -> &str {
        &self.system_message
    }

    pub fn describe(&self, snap: &ContextSnapshot) -> Result<String, PipelineError> {
        snap.checked_key(&self.domain.schema)?;
        Ok(self.renderer.render(snap)?)
    }

    pub fn add_example(&self, example: Example) -> Result<(), PipelineError> {
        Ok(self.pool.add(example, &self.domain)?)
    }

    pub fn remove_example(&self, id: &str) -> Result<Example, PipelineError> {
        Ok(self.pool.remove(id)?)
    }

    /// Brings the embedding side-table up to date with the pool.
    pub fn refresh_embeddings(&self) -> EmbedOutcome {
        embed_pool(
            &self.pool.snapshot(),
            &self.renderer,
            &*self.embedder,
            &self.embeddings,
        )
    }

    /// Embeds the current pool, failing on the first example that cannot
    /// be embedded.
    pub fn embed_pool(&self) -> Result<Vec<EmbeddedExample>, PipelineError> {
        let outcome = self.refresh_embeddings();
        if let Some((id, err)) = outcome.failures.into_iter().next() {
            log::error!("embedding example {id} failed");
            return Err(err.into());
        }
        Ok(outcome.embedded)
    }

    /// Similarity of `snap` to every pool example, in pool order.
    pub fn similarity(&self, snap: &ContextSnapshot) -> Result<Vec<ScoredExample>, PipelineError> {
        let description = self.describe(snap)?;
        let query = self.embedder.embed(&description)?;
        Ok(similarities(&query, &self.embed_pool()?)?)
    }

    fn prepare_with(
        &self,
        snap: &ContextSnapshot,
        k: f64,
        pool: &[EmbeddedExample],
    ) -> Result<PreparedContext, PipelineError> {
        let canonical_key = snap.checked_key(&self.domain.schema)?;
        let description = self.renderer.render(snap)?;
        let query = self.embedder.embed(&description)?;
        let selection = select_by_vector(&query, pool, k)?;
        let descriptions = selection
            .selected
            .iter()
            .map(|s| self.renderer.render(&s.example.snapshot()))
            .collect::<Result<Vec<_>, _>>()?;
        let turns: Vec<ExampleTurn<'_>> = selection
            .selected
            .iter()
            .zip(&descriptions)
            .map(|(s, d)| ExampleTurn {
                description: d,
                consistent: &s.example.consistent,
                note: s.example.note.as_deref(),
            })
            .collect();
        let prompt = assemble(&self.system_message, &turns, &description);
        let prompt_length = estimate_length(&prompt);
        let mut warnings = selection.warnings;
        if prompt_length > self.prompt_budget {
            warnings.push(format!(
                "prompt estimate {prompt_length} exceeds budget {}",
                self.prompt_budget
            ));
        }
        Ok(PreparedContext {
            canonical_key,
            description,
            selected: selection.selected,
            warnings,
            prompt,
            prompt_length,
        })
    }

    /// Description, selection and prompt for `snap` without calling the LLM.
    pub fn prepare(
        &self,
        snap: &ContextSnapshot,
        k: f64,
    ) -> Result<PreparedContext, PipelineError> {
        self.prepare_with(snap, k, &self.embed_pool()?)
    }

    fn request(&self, prepared: &PreparedContext) -> CompletionRequest {
        let mut req = CompletionRequest::new(
            prepared.prompt.clone(),
            self.model.clone(),
            &prepared.canonical_key,
        );
        req.temperature = self.temperature;
        req
    }

    fn complete_cached(
        &self,
        snap: &ContextSnapshot,
        prepared: &PreparedContext,
        k: f64,
    ) -> Result<(String, bool), GatewayError> {
        self.registry.register(snap);
        let acts = &self.domain.activities;
        let policy = self.policy;
        let done = cached_complete_with(
            &self.request(prepared),
            k,
            &*self.backend,
            &self.cache,
            |raw| extract(raw, acts, &policy).ok().map(|e| e.vector),
        )?;
        Ok((done.response, done.cache_hit))
    }

    /// Runs the full single-context pipeline and returns every intermediate.
    /// Backend failures are returned as errors.
    pub fn probe(&self, snap: &ContextSnapshot, k: f64) -> Result<ProbeResult, PipelineError> {
        let prepared = self.prepare(snap, k)?;
        let (raw_response, cache_hit) = self.complete_cached(snap, &prepared, k)?;
        let extraction = extract(&raw_response, &self.domain.activities, &self.policy)?;
        Ok(ProbeResult {
            k,
            backend_id: self.backend.id().to_string(),
            consistent: names_from_vector(&self.domain.activities, &extraction.vector)?,
            vector: extraction.vector,
            fallback: extraction.fallback,
            diagnostics: extraction
                .diagnostics
                .iter()
                .map(ToString::to_string)
                .collect(),
            raw_response,
            cache_hit,
            prepared,
        })
    }

    fn fallback_outcome(&self, diagnostic: Diagnostic) -> Result<ContextOutcome, PipelineError> {
        let extraction = match self.policy.fallback {
            crate::extract::Fallback::AllConsistent => {
                ConsistencyVector::ones(self.domain.activities.len())
            }
            crate::extract::Fallback::AllInconsistent => {
                ConsistencyVector::zeros(self.domain.activities.len())
            }
            crate::extract::Fallback::Fail => {
                return Err(PipelineError::Config(format!(
                    "context failed: {diagnostic}"
                )))
            }
        };
        Ok(ContextOutcome {
            vector: extraction,
            cache_hit: false,
            backend_called: false,
            fallback: true,
            failed: true,
            diagnostics: vec![diagnostic],
            examples: 0,
            prompt_length: 0,
        })
    }

    fn process(
        &self,
        snap: &ContextSnapshot,
        k: f64,
        pool: &[EmbeddedExample],
    ) -> Result<ContextOutcome, PipelineError> {
        let prepared = match self.prepare_with(snap, k, pool) {
            Ok(p) => p,
            Err(e) => {
                return self.fallback_outcome(Diagnostic::BackendFailure {
                    message: e.to_string(),
                })
            }
        };
        let (raw, cache_hit) = match self.complete_cached(snap, &prepared, k) {
            Ok(done) => done,
            Err(e) => {
                log::warn!("{}: {e}", prepared.canonical_key);
                let mut outcome = self.fallback_outcome(Diagnostic::BackendFailure {
                    message: e.to_string(),
                })?;
                outcome.backend_called = true;
                outcome.examples = prepared.selected.len();
                outcome.prompt_length = prepared.prompt_length;
                return Ok(outcome);
            }
        };
        let extraction = extract(&raw, &self.domain.activities, &self.policy)?;
        Ok(ContextOutcome {
            vector: extraction.vector,
            cache_hit,
            backend_called: !cache_hit,
            fallback: extraction.fallback,
            failed: false,
            diagnostics: extraction.diagnostics,
            examples: prepared.selected.len(),
            prompt_length: prepared.prompt_length,
        })
    }

    /// Generates one vector row per window, querying the backend once per
    /// distinct context (at most `max_in_flight` at a time).
    pub fn run_batch(
        &self,
        windows: &[WindowRecord],
        k: f64,
        max_in_flight: usize,
    ) -> Result<BatchOutput, PipelineError> {
        if !(0.0..=1.0).contains(&k) {
            return Err(PipelineError::Config(format!(
                "k must lie in [0, 1], got {k}"
            )));
        }
        let mut order: Vec<(String, ContextSnapshot)> = Vec::new();
        let mut window_keys = Vec::with_capacity(windows.len());
        let mut seen = HashSet::new();
        for w in windows {
            let snap = w.snapshot();
            let key = snap.checked_key(&self.domain.schema)?;
            if seen.insert(key.clone()) {
                order.push((key.clone(), snap));
            }
            window_keys.push(key);
        }

        let pool = self.embed_pool()?;
        let threads = rayon::ThreadPoolBuilder::new()
            .num_threads(max_in_flight.max(1))
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let outcomes: Vec<ContextOutcome> = threads.install(|| {
            order
                .par_iter()
                .map(|(_, snap)| self.process(snap, k, &pool))
                .collect::<Result<_, _>>()
        })?;

        let mut summary = RunSummary {
            k,
            backend_id: self.backend.id().to_string(),
            windows: windows.len(),
            unique_contexts: order.len(),
            ..Default::default()
        };
        for o in &outcomes {
            summary.backend_calls += usize::from(o.backend_called);
            summary.cache_hits += usize::from(o.cache_hit);
            summary.fallbacks += usize::from(o.fallback);
            summary.failures += usize::from(o.failed);
            summary.prompt_length_max = summary.prompt_length_max.max(o.prompt_length);
            summary.oversized_prompts += usize::from(o.prompt_length > self.prompt_budget);
            for d in &o.diagnostics {
                if let Diagnostic::UnknownName { name } = d {
                    *summary.unknown_names.entry(name.clone()).or_default() += 1;
                }
            }
        }
        if !outcomes.is_empty() {
            summary.examples_per_prompt_mean =
                outcomes.iter().map(|o| o.examples as f64).sum::<f64>() / outcomes.len() as f64;
        }

        let by_key: HashMap<&str, &ContextOutcome> = order
            .iter()
            .map(|(key, _)| key.as_str())
            .zip(&outcomes)
            .collect();
        let activities = self.domain.activities.names().to_vec();
        let records = windows
            .iter()
            .zip(&window_keys)
            .map(|(w, key)| {
                let o = by_key[key.as_str()];
                VectorRecord {
                    window_id: w.window_id.clone(),
                    canonical_key: key.clone(),
                    k,
                    vector: o.vector.clone(),
                    activities: activities.clone(),
                    cache_hit: o.cache_hit,
                    fallback: o.fallback,
                    diagnostics: o.diagnostics.iter().map(ToString::to_string).collect(),
                }
            })
            .collect();
        Ok(BatchOutput { records, summary })
    }
}

pub fn read_vector_records(path: impl AsRef<Path>) -> Result<Vec<VectorRecord>, PipelineError> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: origin.clone(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| PipelineError::Config(format!("{origin}:{}: {e}", n + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Http,
}

/// Settings for HTTP backends, read from a JSON configuration file. The
/// credential comes from `CONTEXTGPT_API_KEY`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub embeddings_endpoint: String,
    pub embedding_model: String,
    pub embedding_dimension: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            embeddings_endpoint: "https://api.openai.com/v1/embeddings".into(),
            embedding_model: "text-embedding-3-small".into(),
            embedding_dimension: 1536,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

impl HttpConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    fn settings(&self, endpoint: &str) -> HttpSettings {
        let mut settings = HttpSettings::new(endpoint);
        settings.timeout = std::time::Duration::from_secs(self.timeout_secs);
        settings
    }
}

/// Paths and options for building a [`Pipeline`] from files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema: PathBuf,
    pub phrases: PathBuf,
    pub template: PathBuf,
    pub pool: PathBuf,
    pub rules: Option<PathBuf>,
    pub k: f64,
    pub backend: BackendKind,
    pub embedder: EmbedderKind,
    pub cache: Option<PathBuf>,
    /// Embedding side-table; defaults to the pool path with
    /// `.embeddings.jsonl` appended.
    pub embeddings: Option<PathBuf>,
    pub max_in_flight: usize,
    pub http: HttpConfig,
}

impl RunConfig {
    /// Config pointing at the files of a bundled dataset directory.
    pub fn for_dataset(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            schema: dir.join("schema.json"),
            phrases: dir.join("phrases.json"),
            template: dir.join("template.json"),
            pool: dir.join("pool.jsonl"),
            rules: Some(dir.join("rules.json")),
            k: 0.0,
            backend: BackendKind::Mock,
            embedder: EmbedderKind::Hash,
            cache: None,
            embeddings: None,
            max_in_flight: 4,
            http: HttpConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.k) {
            return Err(PipelineError::Config(format!(
                "k must lie in [0, 1], got {}",
                self.k
            )));
        }
        if self.max_in_flight == 0 {
            return Err(PipelineError::Config(
                "max-in-flight must be at least 1".into(),
            ));
        }
        for path in [&self.schema, &self.phrases, &self.template] {
            if !path.exists() {
                return Err(PipelineError::Config(format!(
                    "{} does not exist",
                    path.display()
                )));
            }
        }
        if let Some(rules) = &self.rules {
            if !rules.exists() {
                return Err(PipelineError::Config(format!(
                    "{} does not exist",
                    rules.display()
                )));
            }
        }
        if self.backend == BackendKind::Mock && self.rules.is_none() {
            return Err(PipelineError::Config(
                "the mock backend needs a rules file".into(),
            ));
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<Domain, PipelineError> {
        Ok(Domain::load(&self.schema)?)
    }

    pub fn rule_set(&self, domain: &Domain) -> Result<Option<RuleSet>, PipelineError> {
        self.rules
            .as_ref()
            .map(|p| RuleSet::load(p, domain))
            .transpose()
            .map_err(Into::into)
    }

    pub fn build(&self) -> Result<Pipeline, PipelineError> {
        self.validate()?;
        let domain = self.domain()?;
        let table = PhraseTable::load(&self.phrases, &domain.schema)?;
        let template = SystemMessageTemplate::load(&self.template)?;
        let pool = PoolStore::open(&self.pool, &domain)?;
        let registry = ContextRegistry::new();
        let backend: Box<dyn Backend> = match self.backend {
            BackendKind::Mock => {
                let rules = self.rule_set(&domain)?.expect("validated");
                Box::new(MockBackend::new(
                    rules,
                    domain.activities.clone(),
                    registry.clone(),
                ))
            }
            BackendKind::Http => Box::new(
                HttpBackend::new(
                    self.http.settings(&self.http.endpoint),
                    &self.http.model,
                    self.http.retry.clone(),
                    self.max_in_flight,
                )
                .map_err(GatewayError::from)?,
            ),
        };
        let embedder: Box<dyn Embedder> = match self.embedder {
            EmbedderKind::Hash => Box::new(HashEmbedder::default()),
            EmbedderKind::Http => Box::new(
                HttpEmbedder::new(
                    self.http.settings(&self.http.embeddings_endpoint),
                    &self.http.embedding_model,
                    self.http.embedding_dimension,
                    self.http.retry.clone(),
                )
                .map_err(EmbedError::from)?,
            ),
        };
        let embeddings_path = self.embeddings.clone().unwrap_or_else(|| {
            let mut p = self.pool.clone().into_os_string();
            p.push(".embeddings.jsonl");
            p.into()
        });
        let cache = match &self.cache {
            Some(path) => CacheStore::open(path)?,
            None => CacheStore::in_memory(),
        };
        Ok(
            Pipeline::new(domain, table, &template, pool, embedder, backend, registry)?
                .with_cache(cache)
                .with_embedding_store(EmbeddingStore::open(embeddings_path)?)
                .with_model(self.http.model.clone(), self.http.temperature),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::pool::Pool;

    fn pipeline() -> Pipeline {
        let domain = Domain::from_json(data::DOMINO_SCHEMA).unwrap();
        let table = PhraseTable::from_json(data::DOMINO_PHRASES, &domain.schema).unwrap();
        let template = SystemMessageTemplate::from_json(data::DOMINO_TEMPLATE).unwrap();
        let pool = Pool::from_jsonl(data::DOMINO_POOL, &domain, "domino").unwrap();
        let rules = RuleSet::from_json(data::DOMINO_RULES, &domain).unwrap();
        Pipeline::mock(domain, table, &template, PoolStore::in_memory(pool), rules).unwrap()
    }

    const WINDOWS: &str = r#"{"window_id":"w1","user":"u1","z":4,"context":{"speed":"low","environment":"outdoor"}}
{"window_id":"w2","user":"u2","z":4,"context":{"speed":"warp"}}
{"window_id":"w3","user":"u1","z":4,"context":{"semantic-location":"Museum"},"label":"Walking"}
"#;

    #[test]
    fn ingest_keeps_valid_lines() {
        let domain = Domain::from_json(data::DOMINO_SCHEMA).unwrap();
        let report = ingest_windows(WINDOWS, &domain).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].line, 2);

        let good = WINDOWS.replace("warp", "high");
        assert_eq!(ingest_windows(&good, &domain).unwrap().records.len(), 3);
    }

    #[test]
    fn ingest_rejects_duplicate_ids() {
        let domain = Domain::from_json(data::DOMINO_SCHEMA).unwrap();
        let dup = WINDOWS.replace("\"w3\"", "\"w1\"");
        match ingest_windows(&dup, &domain) {
            Err(PipelineError::DuplicateWindow(id)) => assert_eq!(id, "w1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn probe_reports_every_intermediate() {
        let p = pipeline();
        let snap = ContextSnapshot::new(4, [("semantic-location", "Museum"), ("speed", "low")]);
        let probe = p.probe(&snap, 0.5).unwrap();
        assert!(probe
            .prepared
            .description
            .starts_with("In the last 4 seconds"));
        assert_eq!(probe.vector.len(), 14);
        assert!(!probe.consistent.contains(&"Cycling".to_string()));
        assert_eq!(
            probe.prepared.prompt.example_count(),
            probe.prepared.selected.len()
        );
        assert!(!probe.cache_hit);
        assert!(p.probe(&snap, 0.5).unwrap().cache_hit);
    }

    #[test]
    fn threshold_one_means_no_examples() {
        let p = pipeline();
        let snap = ContextSnapshot::new(4, [("speed", "low")]);
        let prepared = p.prepare(&snap, 1.0).unwrap();
        assert!(prepared.selected.is_empty());
        assert_eq!(prepared.prompt.messages.len(), 2);
        let all = p.prepare(&snap, 0.0).unwrap();
        assert_eq!(all.selected.len(), 21);
    }

    #[test]
    fn budget_sits_above_the_full_domino_prompt() {
        let p = pipeline();
        let snap = ContextSnapshot::new(4, [("speed", "low")]);
        let prepared = p.prepare(&snap, 0.0).unwrap();
        assert!(
            prepared.prompt_length <= DEFAULT_PROMPT_BUDGET,
            "{}",
            prepared.prompt_length
        );
        assert!(prepared.warnings.is_empty());
        let tight = pipeline().with_prompt_budget(100);
        assert!(!tight.prepare(&snap, 0.0).unwrap().warnings.is_empty());
    }

    #[test]
    fn batch_and_probe_agree() {
        let p = pipeline();
        let domain = p.domain().clone();
        let windows = ingest_windows(&WINDOWS.replace("warp", "high"), &domain)
            .unwrap()
            .records;
        let out = p.run_batch(&windows, 0.25, 2).unwrap();
        assert_eq!(out.records.len(), 3);
        for (w, rec) in windows.iter().zip(&out.records) {
            assert_eq!(p.probe(&w.snapshot(), 0.25).unwrap().vector, rec.vector);
        }
    }

    #[test]
    fn backend_failure_degrades_to_fallback_in_batch() {
        struct Down;
        impl Backend for Down {
            fn id(&self) -> &str {
                "down"
            }
            fn complete(&self, _: &CompletionRequest) -> Result<String, GatewayError> {
                Err(GatewayError::Refusal("no".into()))
            }
        }
        let domain = Domain::from_json(data::DOMINO_SCHEMA).unwrap();
        let table = PhraseTable::from_json(data::DOMINO_PHRASES, &domain.schema).unwrap();
        let template = SystemMessageTemplate::from_json(data::DOMINO_TEMPLATE).unwrap();
        let p = Pipeline::new(
            domain.clone(),
            table,
            &template,
            PoolStore::in_memory(Pool::new()),
            Box::new(HashEmbedder::default()),
            Box::new(Down),
            ContextRegistry::new(),
        )
        .unwrap();
        let windows = ingest_windows(&WINDOWS.replace("warp", "high"), &domain)
            .unwrap()
            .records;
        let out = p.run_batch(&windows, 0.5, 1).unwrap();
        assert_eq!(out.summary.failures, 3);
        assert!(out
            .records
            .iter()
            .all(|r| r.fallback && r.vector.count_ones() == 14));
        assert!(p.probe(&windows[0].snapshot(), 0.5).is_err());
    }

    #[test]
    fn run_config_validation() {
        let mut cfg = RunConfig::for_dataset(data::data_dir().join("domino"));
        cfg.validate().unwrap();
        cfg.k = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::for_dataset(data::data_dir().join("domino"));
        cfg.rules = None;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::for_dataset("/nonexistent");
        assert!(cfg.validate().is_err());
    }
}
