//! Embedding vector type shared by the encoder, transfer, and packing
//! stages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which representation space a vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    SyntheticImage,
    RealImage,
    CenteredRealImage,
}

impl Modality {
    /// Single-byte code used in the binary shard header.
    pub fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::SyntheticImage => 1,
            Modality::RealImage => 2,
            Modality::CenteredRealImage => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Text),
            1 => Some(Modality::SyntheticImage),
            2 => Some(Modality::RealImage),
            3 => Some(Modality::CenteredRealImage),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Modality::Text => "text",
            Modality::SyntheticImage => "synthetic_image",
            Modality::RealImage => "real_image",
            Modality::CenteredRealImage => "centered_real_image",
        };
        f.write_str(name)
    }
}

/// One embedding with its source id and modality tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub id: String,
    pub vector: Vec<f32>,
    pub modality: Modality,
    pub normalized: bool,
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("vector {id}: entry {index} is not finite")]
    NotFinite { id: String, index: usize },
    #[error("vector {id}: dimension {got}, expected {expected}")]
    DimensionMismatch {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("vector {id}: flagged normalized but L2 norm is {norm}")]
    NotUnit { id: String, norm: f64 },
}

impl EmbeddingVector {
    /// Check finiteness, the expected dimension, and the unit-norm flag
    /// (within 1e-6 when `normalized` is set).
    pub fn validate(&self, expected_dim: usize) -> Result<(), EmbeddingError> {
        if self.vector.len() != expected_dim {
            return Err(EmbeddingError::DimensionMismatch {
                id: self.id.clone(),
                got: self.vector.len(),
                expected: expected_dim,
            });
        }
        for (index, entry) in self.vector.iter().enumerate() {
            if !entry.is_finite() {
                return Err(EmbeddingError::NotFinite {
                    id: self.id.clone(),
                    index,
                });
            }
        }
        if self.normalized {
            let norm = self.l2_norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(EmbeddingError::NotUnit {
                    id: self.id.clone(),
                    norm,
                });
            }
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.vector
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }
}
