//! Text embeddings and cosine similarity.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("provider mismatch: {0} vs {1}")]
    ProviderMismatch(String, String),
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding has non-finite or zero values")]
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider_id: String,
}

impl EmbeddingVector {
    /// Builds a unit-norm vector. Fails on non-finite or all-zero input.
    pub fn normalized(values: Vec<f64>, provider_id: impl Into<String>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Degenerate);
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(EmbedError::Degenerate);
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
            provider_id: provider_id.into(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    /// Arithmetic mean of vectors from one provider (not renormalized).
    pub fn centroid<'a, I>(vectors: I) -> Option<EmbeddingVector>
    where
        I: IntoIterator<Item = &'a EmbeddingVector>,
    {
        let mut iter = vectors.into_iter();
        let first = iter.next()?;
        let mut sum = first.values.clone();
        let mut count = 1usize;
        for v in iter {
            if v.values.len() != sum.len() {
                return None;
            }
            for (s, x) in sum.iter_mut().zip(&v.values) {
                *s += x;
            }
            count += 1;
        }
        let n = count as f64;
        Some(EmbeddingVector {
            values: sum.into_iter().map(|s| s / n).collect(),
            provider_id: first.provider_id.clone(),
        })
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity in [-1, 1]. A zero-norm operand yields 0.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.provider_id != b.provider_id {
        return Err(EmbedError::ProviderMismatch(a.provider_id.clone(), b.provider_id.clone()));
    }
    if a.values.len() != b.values.len() {
        return Err(EmbedError::DimensionMismatch(a.values.len(), b.values.len()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let denom = l2_norm(&a.values) * l2_norm(&b.values);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn provider_id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// Offline bag-of-words embedder: lowercased alphanumeric tokens hashed
/// (FNV-1a) into `dimension` buckets, counts L2-normalized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FallbackEmbedder {
    dimension: usize,
    provider: String,
}

impl FallbackEmbedder {
    pub fn new(dimension: usize) -> Self {
        let dimension = dimension.max(1);
        Self {
            dimension,
            provider: format!("fallback-hash-{dimension}"),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dimension as u64) as usize
    }
}

impl Default for FallbackEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Embedder for FallbackEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut counts = vec![0.0f64; self.dimension];
        let mut any = false;
        for token in Self::tokens(text) {
            counts[self.bucket(&token)] += 1.0;
            any = true;
        }
        if !any {
            return Err(EmbedError::EmptyText);
        }
        EmbeddingVector::normalized(counts, self.provider.clone())
    }
}

pub const EMBED_BASE_ENV: &str = "MACD_EMBED_BASE";

/// OpenAI-style `/embeddings` endpoint client.
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    provider: String,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Result<Self, EmbedError> {
        let model = model.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            provider: format!("http:{model}"),
            model,
            client,
        })
    }

    pub fn from_env(model: impl Into<String>) -> Result<Self, EmbedError> {
        let base = std::env::var(EMBED_BASE_ENV)
            .map_err(|_| EmbedError::ProviderUnavailable(format!("{EMBED_BASE_ENV} is not set")))?;
        Self::new(base, model)
    }
}

impl Embedder for HttpEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let resp = self
            .client
            .post(format!("{}/embeddings", self.base_url))
            .json(&json!({"model": self.model, "input": text}))
            .send()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbedError::ProviderUnavailable(format!("HTTP {}", resp.status())));
        }
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        let values: Vec<f64> = value
            .pointer("/data/0/embedding")
            .and_then(|v| v.as_array())
            .ok_or_else(|| EmbedError::ProviderUnavailable("missing data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().unwrap_or(f64::NAN))
            .collect();
        EmbeddingVector::normalized(values, self.provider.clone())
    }
}
