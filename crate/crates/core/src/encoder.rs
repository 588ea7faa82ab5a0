//! Text embedding backends.
//!
//! The mock encoder makes every downstream stage testable offline: for a
//! given (seed, dim) it maps text to the Gaussian vector drawn from
//! `SplitMix64::stream(seed, fnv1a64(text))` (coordinates in order, then
//! optional unit normalization, then f32 cast). Fixed-width integer
//! hashing plus the documented uniform-to-Gaussian transform keep the
//! output reproducible by independent implementations.
//!
//! The HTTP backend posts `{"model", "input": [...]}` to an
//! `/embeddings` endpoint and reads `{"data": [{"embedding": [...]}]}`.
//! All vectors of a run must share one dimension; drift is an error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingVector, Modality};
use crate::gap::{gap_vector, GapModelParams};
use crate::rng::{fnv1a64, SplitMix64};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("embedding backend failure at input {index}: {detail}")]
    Backend { index: usize, detail: String },
    #[error("dimension drift at input {index}: got {got}, run dimension is {expected}")]
    DimensionDrift {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite embedding entry at input {index}")]
    NotFinite { index: usize },
    #[error("invalid encoder configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("paired embedding requires encoder dim {encoder} to equal gap model dim {gap}")]
    PairedDimMismatch { encoder: usize, gap: usize },
}

pub trait EncoderBackend: Send + Sync {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EncoderError>;
    fn dim(&self) -> usize;
    fn id(&self) -> &str;
    fn normalized(&self) -> bool;
}

/// Deterministic hash-projection encoder.
pub struct MockEncoder {
    pub dim: usize,
    pub seed: u64,
    pub normalize: bool,
    id: String,
}

impl MockEncoder {
    pub fn new(dim: usize, seed: u64, normalize: bool) -> Self {
        Self {
            dim,
            seed,
            normalize,
            id: format!("mock-encoder-d{dim}-s{seed}"),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut rng = SplitMix64::stream(self.seed, fnv1a64(text));
        let mut row: Vec<f64> = (0..self.dim).map(|_| rng.next_gaussian()).collect();
        if self.normalize {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
        }
        row.into_iter().map(|x| x as f32).collect()
    }
}

impl EncoderBackend for MockEncoder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EncoderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn normalized(&self) -> bool {
        self.normalize
    }
}

/// Encode (id, text) pairs into order-aligned embedding vectors,
/// enforcing one dimension and finite entries across the run.
pub fn embed_texts(
    backend: &dyn EncoderBackend,
    items: &[(String, String)],
) -> Result<Vec<EmbeddingVector>, EncoderError> {
    let texts: Vec<String> = items.iter().map(|(_, t)| t.clone()).collect();
    let rows = backend.embed_batch(&texts)?;
    let expected = backend.dim();
    let mut out = Vec::with_capacity(rows.len());
    for (index, ((id, _), row)) in items.iter().zip(rows).enumerate() {
        if row.len() != expected {
            return Err(EncoderError::DimensionDrift {
                index,
                got: row.len(),
                expected,
            });
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(EncoderError::NotFinite { index });
        }
        out.push(EmbeddingVector {
            id: id.clone(),
            vector: row,
            modality: Modality::Text,
            normalized: backend.normalized(),
        });
    }
    Ok(out)
}

/// Paired text/image embeddings for end-to-end tests: image_i is
/// text_i - c - eps_i, so text - image follows the constant-plus-noise
/// gap model with the text side as `x`. Noise for row i comes from
/// `SplitMix64::stream(gap.rng_seed ^ PAIR_NOISE_SALT, i)`.
pub fn mock_paired_embed(
    encoder: &MockEncoder,
    items: &[(String, String)],
    gap: &GapModelParams,
) -> Result<(Vec<EmbeddingVector>, Vec<EmbeddingVector>), EncoderError> {
    const PAIR_NOISE_SALT: u64 = 0x70616972;
    if encoder.dim != gap.d {
        return Err(EncoderError::PairedDimMismatch {
            encoder: encoder.dim,
            gap: gap.d,
        });
    }
    let texts = embed_texts(encoder, items)?;
    let c = gap_vector(gap);
    let mut images = Vec::with_capacity(texts.len());
    for (row, text) in texts.iter().enumerate() {
        let mut rng = SplitMix64::stream(gap.rng_seed ^ PAIR_NOISE_SALT, row as u64);
        let vector: Vec<f32> = text
            .vector
            .iter()
            .zip(&c)
            .map(|(&t, &ci)| {
                let noise = if gap.sigma > 0.0 {
                    gap.sigma * rng.next_gaussian()
                } else {
                    0.0
                };
                (f64::from(t) - ci - noise) as f32
            })
            .collect();
        images.push(EmbeddingVector {
            id: text.id.clone(),
            vector,
            modality: Modality::RealImage,
            normalized: false,
        });
    }
    Ok((texts, images))
}

/// HTTP embeddings backend. When `normalize` is set vectors are unit
/// scaled client-side after receipt.
pub struct HttpEncoderBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    normalize: bool,
    id: String,
}

impl HttpEncoderBackend {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dim: usize,
        normalize: bool,
        timeout: std::time::Duration,
    ) -> Result<Self, EncoderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EncoderError::InvalidConfig {
                reason: format!("http client: {e}"),
            })?;
        let mut base_url = base_url.into();
        while base_url.ends_with('/') {
            base_url.pop();
        }
        let model = model.into();
        let id = format!("http:{model}");
        Ok(Self {
            client,
            base_url,
            model,
            api_key,
            dim,
            normalize,
            id,
        })
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    embedding: Vec<f32>,
}

impl EncoderBackend for HttpEncoderBackend {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EncoderError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut request = self
            .client
            .post(format!("{}/embeddings", self.base_url))
            .json(&EmbedRequest {
                model: &self.model,
                input: texts,
            });
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| EncoderError::Backend {
            index: 0,
            detail: e.to_string(),
        })?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(EncoderError::Backend {
                index: 0,
                detail: format!("status {status}"),
            });
        }
        let parsed: EmbedResponse = response.json().map_err(|e| EncoderError::Backend {
            index: 0,
            detail: format!("invalid response body: {e}"),
        })?;
        if parsed.data.len() != texts.len() {
            return Err(EncoderError::Backend {
                index: parsed.data.len(),
                detail: format!(
                    "server returned {} embeddings for {} inputs",
                    parsed.data.len(),
                    texts.len()
                ),
            });
        }
        let mut rows = Vec::with_capacity(parsed.data.len());
        for item in parsed.data {
            let mut row = item.embedding;
            if self.normalize {
                let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in row.iter_mut() {
                        *x = (f64::from(*x) / norm) as f32;
                    }
                }
            }
            rows.push(row);
        }
        Ok(rows)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn normalized(&self) -> bool {
        self.normalize
    }
}
