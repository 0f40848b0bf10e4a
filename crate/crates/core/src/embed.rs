//! Text embedding providers used for example selection.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{HttpSettings, RetryPolicy, TransportError};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedder returned {actual} dimensions, expected {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("embedding request failed: {0}")]
    Transport(#[from] TransportError),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
}

pub trait Embedder: Send + Sync {
    /// Identifies the model and settings; stored next to cached vectors.
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Offline embedder: hashes word unigrams and bigrams into a fixed number of
/// non-negative buckets and normalizes to unit length.
///
/// Texts sharing words get a positive cosine, so thresholds behave like they
/// do with sentence-embedding models. The same `(dimension, seed, text)`
/// always gives the same vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
    id: String,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self {
            dimension,
            seed,
            id: format!("hash-bow-d{dimension}-s{seed}"),
        }
    }

    fn bucket(&self, feature: &str) -> usize {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(feature.as_bytes())
            .finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(head) % self.dimension as u64) as usize
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256, 0)
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let lowered = text.to_lowercase();
        let tokens: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut vector = vec![0f32; self.dimension];
        for token in &tokens {
            vector[self.bucket(token)] += 1.0;
        }
        for pair in tokens.windows(2) {
            vector[self.bucket(&format!("{} {}", pair[0], pair[1]))] += 1.0;
        }
        let norm = vector.iter().map(|x| x * x).sum::<f32>().sqrt();
        vector.iter_mut().for_each(|x| *x /= norm);
        Ok(vector)
    }
}

/// Embeddings over an OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbedder {
    settings: HttpSettings,
    model: String,
    dimension: usize,
    retry: RetryPolicy,
    id: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

impl HttpEmbedder {
    pub fn new(
        settings: HttpSettings,
        model: impl Into<String>,
        dimension: usize,
        retry: RetryPolicy,
    ) -> Result<Self, TransportError> {
        let model = model.into();
        let client = settings.client()?;
        Ok(Self {
            id: format!("http:{model}"),
            settings,
            model,
            dimension,
            retry,
            client,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let body = EmbeddingRequest {
            model: &self.model,
            input: text,
        };
        let raw = self
            .retry
            .run(|| self.settings.post_json(&self.client, &body))?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&raw).map_err(|e| EmbedError::Malformed(e.to_string()))?;
        let vector = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbedError::Malformed("no embedding in response".into()))?
            .embedding;
        if vector.len() != self.dimension {
            return Err(EmbedError::Dimension {
                expected: self.dimension,
                actual: vector.len(),
            });
        }
        Ok(vector)
    }
}
