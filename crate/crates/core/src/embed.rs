//! Text embedding backends.
//!
//! Both backends emit L2-normalized vectors so that cosine similarity at
//! query time reduces to an inner product. Query and document text go
//! through the same backend instance.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::hash::{fnv1a64, mix64};

pub const DEFAULT_EMBEDDING_MODEL: &str = "sentence-transformers/all-mpnet-base-v2";
const NORM_TOLERANCE: f64 = 1e-6;
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("text at position {index} is empty")]
    EmptyText { index: usize },
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed embedding response: {0}")]
    MalformedResponse(String),
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("vector contains a non-finite component")]
    NonFinite,
    #[error("invalid embedder configuration: {0}")]
    InvalidConfig(String),
}

/// A finite real vector, normally unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Wraps raw values without normalizing them.
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOLERANCE
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, EmbedError> {
        EmbeddingVector::new(self.0.iter().map(|v| v * factor).collect())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(values: &[f64]) -> Result<EmbeddingVector, EmbedError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    let n = norm(values);
    if n < ZERO_NORM {
        return Err(EmbedError::ZeroVector);
    }
    Ok(EmbeddingVector(values.iter().map(|v| v / n).collect()))
}

/// Deterministic hashed character-trigram embedding.
///
/// Each lowercase character 3-gram (or the whole text when it is shorter
/// than three characters) is hashed with FNV-1a, XORed with `seed` and run
/// through the SplitMix64 finalizer. The hash picks component `h % dim` and
/// bit 63 picks the sign of the ±1 contribution. The bag is L2-normalized.
///
/// Grams can cancel each other out when they collide with opposite signs,
/// so `ZeroVector` is possible for very short texts at small `dim`.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> Result<EmbeddingVector, EmbedError> {
    if text.is_empty() {
        return Err(EmbedError::EmptyText { index: 0 });
    }
    if dim < 8 {
        return Err(EmbedError::InvalidConfig(format!(
            "mock embedder needs dim >= 8, got {dim}"
        )));
    }
    let lower: Vec<char> = text.to_lowercase().chars().collect();
    let mut acc = vec![0.0f64; dim];
    let mut add = |gram: &[char]| {
        let g: String = gram.iter().collect();
        let h = mix64(fnv1a64(g.as_bytes()) ^ seed);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        acc[(h % dim as u64) as usize] += sign;
    };
    if lower.len() < 3 {
        add(&lower);
    } else {
        lower.windows(3).for_each(&mut add);
    }
    l2_normalize(&acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub dim: usize,
    pub batch_size: usize,
    pub timeout_ms: u64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: DEFAULT_EMBEDDING_MODEL.to_string(),
            dim: 768,
            batch_size: 32,
            timeout_ms: 30_000,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 || self.batch_size == 0 || self.timeout_ms == 0 {
            return Err(EmbedError::InvalidConfig(
                "dim, batch_size and timeout_ms must be positive".into(),
            ));
        }
        if self.kind == BackendKind::Remote && self.endpoint_url.is_none() {
            return Err(EmbedError::InvalidConfig(
                "remote embedder requires endpoint_url".into(),
            ));
        }
        if self.kind == BackendKind::Mock && self.dim < 8 {
            return Err(EmbedError::InvalidConfig("mock embedder needs dim >= 8".into()));
        }
        Ok(())
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifier recorded in the index manifest.
    fn model_name(&self) -> &str;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

fn check_texts(texts: &[&str]) -> Result<(), EmbedError> {
    match texts.iter().position(|t| t.trim().is_empty()) {
        Some(index) => Err(EmbedError::EmptyText { index }),
        None => Ok(()),
    }
}

pub fn build_embedder(config: &EmbedderConfig) -> Result<Box<dyn Embedder>, EmbedError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Mock => Box::new(MockEmbedder::new(config.dim, config.seed)?),
        BackendKind::Remote => Box::new(RemoteEmbedder::new(config)?),
    })
}

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    model_name: String,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EmbedError> {
        if dim < 8 {
            return Err(EmbedError::InvalidConfig("mock embedder needs dim >= 8".into()));
        }
        Ok(MockEmbedder {
            dim,
            seed,
            model_name: format!("mock-trigram-fnv1a/seed={seed}"),
        })
    }
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_texts(texts)?;
        texts
            .iter()
            .map(|t| mock_embed(t, self.dim, self.seed))
            .collect()
    }
}

/// Client for an OpenAI-compatible `/v1/embeddings` endpoint.
pub struct RemoteEmbedder {
    url: String,
    model_name: String,
    dim: usize,
    batch_size: usize,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(config: &EmbedderConfig) -> Result<Self, EmbedError> {
        let base = config
            .endpoint_url
            .as_deref()
            .ok_or_else(|| EmbedError::InvalidConfig("remote embedder requires endpoint_url".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| EmbedError::InvalidConfig(e.to_string()))?;
        Ok(RemoteEmbedder {
            url: format!("{}/v1/embeddings", base.trim_end_matches('/')),
            model_name: config.model_name.clone(),
            dim: config.dim,
            batch_size: config.batch_size,
            client,
        })
    }

    fn request(&self, batch: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let response = self
            .client
            .post(&self.url)
            .json(&EmbeddingsRequest {
                model: &self.model_name,
                input: batch,
            })
            .send()
            .map_err(|e| EmbedError::BackendUnavailable(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| EmbedError::BackendUnavailable(e.to_string()))?;
        if !status.is_success() {
            return Err(EmbedError::BackendUnavailable(format!("HTTP {status}: {body}")));
        }
        let parsed: EmbeddingsResponse =
            serde_json::from_str(&body).map_err(|e| EmbedError::MalformedResponse(e.to_string()))?;
        if parsed.data.len() != batch.len() {
            return Err(EmbedError::MalformedResponse(format!(
                "expected {} embeddings, got {}",
                batch.len(),
                parsed.data.len()
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; batch.len()];
        for datum in parsed.data {
            let slot = slots.get_mut(datum.index).ok_or_else(|| {
                EmbedError::MalformedResponse(format!("embedding index {} out of range", datum.index))
            })?;
            if slot.replace(datum.embedding).is_some() {
                return Err(EmbedError::MalformedResponse(format!(
                    "duplicate embedding index {}",
                    datum.index
                )));
            }
        }
        slots
            .into_iter()
            .map(|values| {
                let values = values.expect("every slot filled: counts match and indices unique");
                if values.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.dim,
                        got: values.len(),
                    });
                }
                l2_normalize(&values)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_texts(texts)?;
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.batch_size) {
            out.extend(self.request(batch)?);
        }
        Ok(out)
    }
}
