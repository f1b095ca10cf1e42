//! Text embedders.
//!
//! The native embedder hashes word n-grams into a fixed number of signed
//! buckets and L2-normalizes the result. An external embedder can be plugged
//! in through a small HTTP contract: `POST {endpoint}/embed` with a JSON array
//! of strings, answered by an equal-length array of `dim`-long number arrays.

use serde::{Deserialize, Serialize};
use url::Url;
use xxhash_rust::xxh3::xxh3_64_with_seed;

/// Salt mixed into the seed for the sign hash so that bucket and sign are
/// drawn from independent hash functions.
const SIGN_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Texts per HTTP request to an external embedder.
const EXTERNAL_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedder unavailable at index {index}: {reason}")]
    EmbedderUnavailable { index: usize, reason: String },
    #[error("invalid embedder spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Unit,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub norm: Norm,
}

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dim],
            norm: Norm::Raw,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// Scales to unit length; an all-zero vector stays zero with a raw flag.
    pub fn normalized(mut self) -> Self {
        let n = self.l2_norm();
        if n > 0.0 {
            for v in &mut self.values {
                *v /= n;
            }
            self.norm = Norm::Unit;
        } else {
            self.norm = Norm::Raw;
        }
        self
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let (a, b) = (self.l2_norm(), other.l2_norm());
        if a == 0.0 || b == 0.0 {
            return 0.0;
        }
        dot(&self.values, &other.values) / (a * b)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    HashedNgram,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub ngram_range: (usize, usize),
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<Url>,
    /// Concurrent requests allowed against an external endpoint.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_in_flight() -> usize {
    4
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            kind: EmbedderKind::HashedNgram,
            dim: 512,
            ngram_range: (1, 2),
            seed: 0,
            endpoint: None,
            max_in_flight: default_in_flight(),
        }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let (lo, hi) = self.ngram_range;
        if !(1 <= lo && lo <= hi && hi <= 3) {
            return Err(EmbedError::InvalidSpec(format!(
                "ngram_range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= 3"
            )));
        }
        if self.dim < 16 {
            return Err(EmbedError::InvalidSpec(format!(
                "dim {} is below 16",
                self.dim
            )));
        }
        if self.kind == EmbedderKind::External && self.endpoint.is_none() {
            return Err(EmbedError::InvalidSpec(
                "external embedder needs an endpoint".into(),
            ));
        }
        if self.max_in_flight == 0 {
            return Err(EmbedError::InvalidSpec(
                "max_in_flight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that can turn texts into fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Embeds `texts` in order. Errors carry the index of the failing text.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

/// Builds the embedder described by `spec`.
pub fn embedder_from_spec(spec: &EmbedderSpec) -> Result<Box<dyn Embedder>, EmbedError> {
    spec.validate()?;
    Ok(match spec.kind {
        EmbedderKind::HashedNgram => Box::new(HashedNgramEmbedder::new(spec.clone())?),
        EmbedderKind::External => Box::new(ExternalEmbedder::new(spec.clone())?),
    })
}

pub fn embed_text(text: &str, spec: &EmbedderSpec) -> Result<EmbeddingVector, EmbedError> {
    embedder_from_spec(spec)?.embed(text)
}

pub fn embed_batch(
    texts: &[&str],
    spec: &EmbedderSpec,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    embedder_from_spec(spec)?.embed_batch(texts)
}

/// Word n-grams of `text` for every order in `range`, joined by single spaces.
pub fn word_ngrams(text: &str, range: (usize, usize)) -> Vec<String> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    for n in range.0..=range.1 {
        if n == 0 || tokens.len() < n {
            continue;
        }
        for window in tokens.windows(n) {
            out.push(window.join(" "));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    spec: EmbedderSpec,
}

impl HashedNgramEmbedder {
    pub fn new(spec: EmbedderSpec) -> Result<Self, EmbedError> {
        spec.validate()?;
        Ok(HashedNgramEmbedder { spec })
    }

    /// Bucket index and sign for one n-gram.
    pub fn bucket(&self, ngram: &str) -> (usize, f64) {
        let bytes = ngram.as_bytes();
        let index = (xxh3_64_with_seed(bytes, self.spec.seed) % self.spec.dim as u64) as usize;
        let sign = if xxh3_64_with_seed(bytes, self.spec.seed ^ SIGN_SALT) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        (index, sign)
    }

    fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut v = EmbeddingVector::zeros(self.spec.dim);
        for gram in word_ngrams(text, self.spec.ngram_range) {
            let (i, s) = self.bucket(&gram);
            v.values[i] += s;
        }
        v.normalized()
    }
}

impl Embedder for HashedNgramEmbedder {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Client for a remote sentence-embedding service.
pub struct ExternalEmbedder {
    spec: EmbedderSpec,
    url: Url,
    client: reqwest::blocking::Client,
}

impl ExternalEmbedder {
    pub fn new(spec: EmbedderSpec) -> Result<Self, EmbedError> {
        spec.validate()?;
        let base = spec
            .endpoint
            .clone()
            .ok_or_else(|| EmbedError::InvalidSpec("missing endpoint".into()))?;
        let url = base
            .join("embed")
            .map_err(|e| EmbedError::InvalidSpec(e.to_string()))?;
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| EmbedError::InvalidSpec(e.to_string()))?;
        Ok(ExternalEmbedder { spec, url, client })
    }

    fn request(&self, offset: usize, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let unavailable = |reason: String| EmbedError::EmbedderUnavailable {
            index: offset,
            reason,
        };
        let resp = self
            .client
            .post(self.url.clone())
            .json(&texts)
            .send()
            .map_err(|e| unavailable(e.to_string()))?;
        if resp.status() != reqwest::StatusCode::OK {
            return Err(unavailable(format!("HTTP {}", resp.status())));
        }
        let rows: Vec<Vec<f64>> = resp.json().map_err(|e| unavailable(e.to_string()))?;
        if rows.len() != texts.len() {
            return Err(unavailable(format!(
                "expected {} vectors, got {}",
                texts.len(),
                rows.len()
            )));
        }
        rows.into_iter()
            .enumerate()
            .map(|(i, values)| {
                if values.len() != self.spec.dim {
                    Err(EmbedError::EmbedderUnavailable {
                        index: offset + i,
                        reason: format!("expected dim {}, got {}", self.spec.dim, values.len()),
                    })
                } else {
                    Ok(EmbeddingVector {
                        values,
                        norm: Norm::Raw,
                    }
                    .normalized())
                }
            })
            .collect()
    }
}

impl Embedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let chunks: Vec<(usize, &[&str])> = texts
            .chunks(EXTERNAL_CHUNK)
            .enumerate()
            .map(|(i, c)| (i * EXTERNAL_CHUNK, c))
            .collect();
        let mut out = Vec::with_capacity(texts.len());
        for wave in chunks.chunks(self.spec.max_in_flight) {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|(offset, chunk)| s.spawn(move || self.request(*offset, chunk)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embed request thread panicked"))
                    .collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }
}
