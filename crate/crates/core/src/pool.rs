//! The example pool: storage, embeddings and similarity-based selection.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context::{ContextSnapshot, ContextValue, Domain};
use crate::describe::{DescribeError, Renderer};
use crate::embed::{EmbedError, Embedder};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("threshold k must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("invalid example `{id}`: {reason}")]
    InvalidExample { id: String, reason: String },
    #[error(transparent)]
    Describe(#[from] DescribeError),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A context together with the activities the prompt engineer considers
/// consistent with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub context: BTreeMap<String, ContextValue>,
    pub z: u32,
    pub consistent: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default = "Utc::now")]
    pub created_at: DateTime<Utc>,
}

impl Example {
    pub fn snapshot(&self) -> ContextSnapshot {
        ContextSnapshot {
            user: None,
            window_seconds: self.z,
            assignments: self.context.clone(),
        }
    }

    pub fn validate(&self, domain: &Domain) -> Result<(), PoolError> {
        let invalid = |reason: String| PoolError::InvalidExample {
            id: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.consistent.is_empty() {
            return Err(invalid("no consistent activities".into()));
        }
        if let Some(name) = self
            .consistent
            .iter()
            .find(|n| !domain.activities.contains(n))
        {
            return Err(invalid(format!("unknown activity `{name}`")));
        }
        self.snapshot()
            .checked_key(&domain.schema)
            .map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }
}

/// Examples in insertion order with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pool {
    examples: Vec<Example>,
}

impl Pool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn add(&mut self, example: Example, domain: &Domain) -> Result<(), PoolError> {
        example.validate(domain)?;
        if self.get(&example.id).is_some() {
            return Err(PoolError::DuplicateId(example.id));
        }
        self.examples.push(example);
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Result<Example, PoolError> {
        let pos = self
            .examples
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| PoolError::UnknownId(id.to_string()))?;
        Ok(self.examples.remove(pos))
    }

    /// Parses a JSONL pool, validating every example.
    pub fn from_jsonl(text: &str, domain: &Domain, origin: &str) -> Result<Self, PoolError> {
        let mut pool = Pool::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let example: Example = serde_json::from_str(line).map_err(|e| PoolError::Parse {
                path: origin.to_string(),
                line: n + 1,
                message: e.to_string(),
            })?;
            pool.add(example, domain).map_err(|e| PoolError::Parse {
                path: origin.to_string(),
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(pool)
    }

    pub fn to_jsonl(&self) -> String {
        self.examples
            .iter()
            .map(|e| serde_json::to_string(e).expect("example serializes") + "\n")
            .collect()
    }
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomically(path: &Path, contents: &[u8]) -> Result<(), PoolError> {
    let io_err = |source| PoolError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// A pool shared between readers and a single writer, optionally persisted
/// to a JSONL file. Every mutation is written to disk before it becomes
/// visible to readers.
#[derive(Debug)]
pub struct PoolStore {
    path: Option<PathBuf>,
    pool: RwLock<Pool>,
}

impl PoolStore {
    pub fn in_memory(pool: Pool) -> Self {
        Self {
            path: None,
            pool: RwLock::new(pool),
        }
    }

    /// Opens a pool file; a missing file is an empty pool.
    pub fn open(path: impl AsRef<Path>, domain: &Domain) -> Result<Self, PoolError> {
        let path = path.as_ref().to_path_buf();
        let pool = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|source| PoolError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Pool::from_jsonl(&text, domain, &path.display().to_string())?
        } else {
            Pool::new()
        };
        Ok(Self {
            path: Some(path),
            pool: RwLock::new(pool),
        })
    }

    pub fn snapshot(&self) -> Pool {
        self.pool.read().unwrap().clone()
    }

    pub fn list(&self) -> Vec<Example> {
        self.pool.read().unwrap().examples.clone()
    }

    pub fn add(&self, example: Example, domain: &Domain) -> Result<(), PoolError> {
        self.mutate(|pool| pool.add(example, domain))
    }

    pub fn remove(&self, id: &str) -> Result<Example, PoolError> {
        self.mutate(|pool| pool.remove(id))
    }

    fn mutate<T>(
        &self,
        op: impl FnOnce(&mut Pool) -> Result<T, PoolError>,
    ) -> Result<T, PoolError> {
        let mut guard = self.pool.write().unwrap();
        let mut next = guard.clone();
        let out = op(&mut next)?;
        if let Some(path) = &self.path {
            write_atomically(path, next.to_jsonl().as_bytes())?;
        }
        *guard = next;
        Ok(out)
    }
}

pub fn text_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the embedding side-table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub embedder_id: String,
    pub text_hash: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedExample {
    pub example: Example,
    pub vector: Vec<f32>,
    pub embedder_id: String,
    pub text_hash: String,
}

/// Embeddings keyed by (example id, embedder id), reused while the
/// description hash still matches.
#[derive(Debug, Default)]
pub struct EmbeddingStore {
    path: Option<PathBuf>,
    records: RwLock<HashMap<(String, String), EmbeddingRecord>>,
}

impl EmbeddingStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, PoolError> {
        let path = path.as_ref().to_path_buf();
        let origin = path.display().to_string();
        let mut records = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|source| PoolError::Io {
                path: origin.clone(),
                source,
            })?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| PoolError::Io {
                    path: origin.clone(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: EmbeddingRecord =
                    serde_json::from_str(&line).map_err(|e| PoolError::Parse {
                        path: origin.clone(),
                        line: n + 1,
                        message: e.to_string(),
                    })?;
                records.insert((rec.id.clone(), rec.embedder_id.clone()), rec);
            }
        }
        Ok(Self {
            path: Some(path),
            records: RwLock::new(records),
        })
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, id: &str, embedder_id: &str, hash: &str) -> Option<Vec<f32>> {
        let records = self.records.read().unwrap();
        records
            .get(&(id.to_string(), embedder_id.to_string()))
            .filter(|r| r.text_hash == hash)
            .map(|r| r.vector.clone())
    }

    fn store(&self, new: Vec<EmbeddingRecord>) -> Result<(), PoolError> {
        if new.is_empty() {
            return Ok(());
        }
        let mut records = self.records.write().unwrap();
        for rec in new {
            records.insert((rec.id.clone(), rec.embedder_id.clone()), rec);
        }
        if let Some(path) = &self.path {
            let mut rows: Vec<&EmbeddingRecord> = records.values().collect();
            rows.sort_by(|a, b| (&a.id, &a.embedder_id).cmp(&(&b.id, &b.embedder_id)));
            let body: String = rows
                .into_iter()
                .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
                .collect();
            write_atomically(path, body.as_bytes())?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct EmbedOutcome {
    pub embedded: Vec<EmbeddedExample>,
    /// Embedder calls made for this run.
    pub computed: usize,
    pub reused: usize,
    pub failures: Vec<(String, PoolError)>,
}

/// Embeds every example's rendered description, reusing stored vectors
/// whose (embedder id, text hash) still match. Failures are collected per
/// example; the rest are still returned.
pub fn embed_pool(
    pool: &Pool,
    renderer: &Renderer,
    embedder: &dyn Embedder,
    store: &EmbeddingStore,
) -> EmbedOutcome {
    let mut outcome = EmbedOutcome::default();
    let mut fresh = Vec::new();
    for example in pool.examples() {
        let text = match renderer.render(&example.snapshot()) {
            Ok(text) => text,
            Err(e) => {
                outcome.failures.push((example.id.clone(), e.into()));
                continue;
            }
        };
        let hash = text_hash(&text);
        let vector = match store.lookup(&example.id, embedder.id(), &hash) {
            Some(v) => {
                outcome.reused += 1;
                v
            }
            None => {
                outcome.computed += 1;
                match embedder.embed(&text) {
                    Ok(v) => {
                        fresh.push(EmbeddingRecord {
                            id: example.id.clone(),
                            embedder_id: embedder.id().to_string(),
                            text_hash: hash.clone(),
                            vector: v.clone(),
                        });
                        v
                    }
                    Err(e) => {
                        outcome.failures.push((example.id.clone(), e.into()));
                        continue;
                    }
                }
            }
        };
        outcome.embedded.push(EmbeddedExample {
            example: example.clone(),
            vector,
            embedder_id: embedder.id().to_string(),
            text_hash: hash,
        });
    }
    if let Err(e) = store.store(fresh) {
        outcome.failures.push(("<embedding store>".into(), e));
    }
    outcome
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, PoolError> {
    if a.len() != b.len() {
        return Err(PoolError::LengthMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(PoolError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredExample {
    pub example: Example,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Selection {
    pub selected: Vec<ScoredExample>,
    pub warnings: Vec<String>,
}

/// Similarity of `query` to every embedded example, in pool order.
pub fn similarities(
    query: &[f32],
    pool: &[EmbeddedExample],
) -> Result<Vec<ScoredExample>, PoolError> {
    pool.iter()
        .map(|e| {
            Ok(ScoredExample {
                example: e.example.clone(),
                score: cosine(query, &e.vector)?,
            })
        })
        .collect()
}

/// Examples scoring strictly above `k`, best first; equal scores keep pool
/// order.
pub fn select_by_vector(
    query: &[f32],
    pool: &[EmbeddedExample],
    k: f64,
) -> Result<Selection, PoolError> {
    if !(0.0..=1.0).contains(&k) {
        return Err(PoolError::InvalidThreshold(k));
    }
    let scored = similarities(query, pool)?;
    let mut warnings = Vec::new();
    if k == 0.0 {
        let non_positive = scored.iter().filter(|s| s.score <= 0.0).count();
        if non_positive > 0 {
            warnings.push(format!(
                "{non_positive} example(s) have similarity <= 0 and are excluded even at k = 0"
            ));
        }
    }
    let mut selected: Vec<ScoredExample> = scored.into_iter().filter(|s| s.score > k).collect();
    // stable sort keeps insertion order among ties
    selected.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(Selection { selected, warnings })
}

/// Renders and embeds `snap`, then selects from the embedded pool.
pub fn select_examples(
    snap: &ContextSnapshot,
    pool: &[EmbeddedExample],
    k: f64,
    renderer: &Renderer,
    embedder: &dyn Embedder,
) -> Result<Selection, PoolError> {
    if !(0.0..=1.0).contains(&k) {
        return Err(PoolError::InvalidThreshold(k));
    }
    let text = renderer.render(snap)?;
    let query = embedder.embed(&text)?;
    select_by_vector(&query, pool, k)
}
