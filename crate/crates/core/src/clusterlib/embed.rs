//! Text embeddings.
//!
//! The reference embedder hashes character 3-grams of the lowercased,
//! space-padded text into `dim` buckets and L2-normalizes the counts. It
//! is deterministic and needs no network. [`HttpEmbedder`] calls an
//! external service and falls back to the reference embedder on failure.

use serde::{Deserialize, Serialize};
use std::time::Duration;

use crate::error::{Result, SageError};

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Reference,
    ExternalService,
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

impl EmbeddingVector {
    /// Normalizes `values`; a zero vector becomes the first basis vector.
    pub fn normalized(mut values: Vec<f64>, source: EmbeddingSource) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            values.iter_mut().for_each(|v| *v /= norm);
        } else {
            let dim = values.len().max(1);
            values = vec![0.0; dim];
            values[0] = 1.0;
        }
        EmbeddingVector { values, source }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Vec<EmbeddingVector>;

    fn embed(&self, text: &str) -> EmbeddingVector {
        self.embed_batch(&[text]).remove(0)
    }
}

/// Hashed character 3-gram embedder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: DEFAULT_DIM }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(SageError::Config("embedding dimension must be positive".into()));
        }
        Ok(HashEmbedder { dim })
    }

    /// Bucket index of a trigram.
    pub fn bucket(&self, trigram: &[char]) -> usize {
        // FNV-1a over the UTF-8 bytes
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = [0u8; 4];
        for c in trigram {
            for b in c.encode_utf8(&mut buf).bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        (h % self.dim as u64) as usize
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0.0; self.dim];
        for gram in trigrams(text) {
            counts[self.bucket(&gram)] += 1.0;
        }
        EmbeddingVector::normalized(counts, EmbeddingSource::Reference)
    }
}

/// Character 3-grams of the lowercased text with whitespace collapsed and a
/// single space of padding on both sides. Empty text has none.
pub fn trigrams(text: &str) -> Vec<[char; 3]> {
    let body = text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    if body.is_empty() {
        return Vec::new();
    }
    let chars: Vec<char> = format!(" {body} ").chars().collect();
    chars.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Vec<EmbeddingVector> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Embedding service client: `POST {"texts": [...]}` returning
/// `{"embeddings": [[...], ...]}`. Any failure falls back to the reference
/// embedder with a warning.
pub struct HttpEmbedder {
    endpoint: String,
    agent: ureq::Agent,
    fallback: HashEmbedder,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, fallback: HashEmbedder) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        HttpEmbedder {
            endpoint: endpoint.into(),
            agent: config.into(),
            fallback,
        }
    }

    fn request(&self, texts: &[&str]) -> std::result::Result<Vec<EmbeddingVector>, String> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .map_err(|e| e.to_string())?;
        let body: EmbedResponse = response.body_mut().read_json().map_err(|e| e.to_string())?;
        if body.embeddings.len() != texts.len() {
            return Err(format!(
                "service returned {} embeddings for {} texts",
                body.embeddings.len(),
                texts.len()
            ));
        }
        if let Some(bad) = body.embeddings.iter().find(|e| e.len() != self.fallback.dim()) {
            return Err(format!("service returned dimension {}, expected {}", bad.len(), self.fallback.dim()));
        }
        Ok(body
            .embeddings
            .into_iter()
            .map(|v| EmbeddingVector::normalized(v, EmbeddingSource::ExternalService))
            .collect())
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.fallback.dim()
    }

    fn embed_batch(&self, texts: &[&str]) -> Vec<EmbeddingVector> {
        match self.request(texts) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("embedding service at {} failed ({e}); using reference embedder", self.endpoint);
                self.fallback.embed_batch(texts)
            }
        }
    }
}
