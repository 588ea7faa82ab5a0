//! Modality representation transfer: mean computation and mean-centering.
//!
//! The pipeline's core transform is a per-modality translation. Text
//! embeddings become synthetic image representations by subtracting the
//! text-corpus mean; at inference time, real image embeddings are centered
//! with the mean of their own batch. Both are two-pass streaming
//! operations: pass one accumulates a compensated (Neumaier) sum per
//! coordinate, pass two subtracts. Partial accumulators merge
//! deterministically in shard order so sharded reductions reproduce the
//! single-pass result.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingVector, Modality};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("cannot take the mean of an empty vector stream")]
    EmptyStream,
    #[error("mixed modalities in one stream: started with {first}, saw {other}")]
    MixedModality { first: Modality, other: Modality },
    #[error("dimension mismatch: started with {first}, saw {other} (vector {id})")]
    DimensionMismatch { first: usize, other: usize, id: String },
    #[error("mean dimension {mean_dim} does not match vector dimension {vector_dim}")]
    MeanDimension { mean_dim: usize, vector_dim: usize },
}

/// Arithmetic mean of a vector stream with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanVector {
    pub vector: Vec<f64>,
    pub sample_count: u64,
    pub modality: Modality,
}

/// Neumaier-compensated scalar sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: CompensatedSum) {
        self.add(other.sum);
        self.compensation += other.compensation;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Streaming per-coordinate mean accumulator.
#[derive(Debug, Clone)]
pub struct MeanAccumulator {
    sums: Vec<CompensatedSum>,
    count: u64,
    modality: Option<Modality>,
}

impl MeanAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            sums: vec![CompensatedSum::default(); dim],
            count: 0,
            modality: None,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, vector: &EmbeddingVector) -> Result<(), TransferError> {
        match self.modality {
            None => self.modality = Some(vector.modality),
            Some(first) if first != vector.modality => {
                return Err(TransferError::MixedModality {
                    first,
                    other: vector.modality,
                })
            }
            _ => {}
        }
        if vector.vector.len() != self.sums.len() {
            return Err(TransferError::DimensionMismatch {
                first: self.sums.len(),
                other: vector.vector.len(),
                id: vector.id.clone(),
            });
        }
        for (sum, &x) in self.sums.iter_mut().zip(&vector.vector) {
            sum.add(f64::from(x));
        }
        self.count += 1;
        Ok(())
    }

    pub fn push_row_f64(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.sums.len());
        for (sum, &x) in self.sums.iter_mut().zip(row) {
            sum.add(x);
        }
        self.count += 1;
    }

    /// Merge a partial accumulator. Call in shard order for reproducibility.
    pub fn merge(&mut self, other: &MeanAccumulator) -> Result<(), TransferError> {
        if let (Some(a), Some(b)) = (self.modality, other.modality) {
            if a != b {
                return Err(TransferError::MixedModality { first: a, other: b });
            }
        }
        if self.modality.is_none() {
            self.modality = other.modality;
        }
        for (sum, partial) in self.sums.iter_mut().zip(&other.sums) {
            sum.merge(*partial);
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<MeanVector, TransferError> {
        let tag = self.modality.unwrap_or(Modality::Text);
        self.finish_as(tag)
    }

    /// Finish with an explicit modality tag, for accumulators fed through
    /// [`MeanAccumulator::push_row_f64`] (raw rows carry no tag).
    pub fn finish_as(&self, modality: Modality) -> Result<MeanVector, TransferError> {
        if self.count == 0 {
            return Err(TransferError::EmptyStream);
        }
        if let Some(tagged) = self.modality {
            if tagged != modality {
                return Err(TransferError::MixedModality {
                    first: tagged,
                    other: modality,
                });
            }
        }
        let n = self.count as f64;
        Ok(MeanVector {
            vector: self.sums.iter().map(|s| s.value() / n).collect(),
            sample_count: self.count,
            modality,
        })
    }
}

/// Mean of a non-empty, single-modality, uniform-dimension stream.
pub fn mean_vector<'a, I>(vectors: I) -> Result<MeanVector, TransferError>
where
    I: IntoIterator<Item = &'a EmbeddingVector>,
{
    let mut iter = vectors.into_iter().peekable();
    let dim = iter.peek().ok_or(TransferError::EmptyStream)?.vector.len();
    let mut acc = MeanAccumulator::new(dim);
    for v in iter {
        acc.push(v)?;
    }
    acc.finish()
}

/// Subtract `mean` from every text vector, yielding synthetic image
/// representations. Ids are preserved, order is preserved, and the output
/// is never marked normalized (translation does not preserve unit norm).
pub fn synthesize_image_reps(
    text_vectors: &[EmbeddingVector],
    mean: &MeanVector,
) -> Result<Vec<EmbeddingVector>, TransferError> {
    center_with(text_vectors, mean, Modality::SyntheticImage)
}

/// Subtract `mean` from every real image vector, yielding centered
/// representations for inference.
pub fn transform_inference_reps(
    real_vectors: &[EmbeddingVector],
    mean: &MeanVector,
) -> Result<Vec<EmbeddingVector>, TransferError> {
    center_with(real_vectors, mean, Modality::CenteredRealImage)
}

fn center_with(
    vectors: &[EmbeddingVector],
    mean: &MeanVector,
    out_modality: Modality,
) -> Result<Vec<EmbeddingVector>, TransferError> {
    let mut out = Vec::with_capacity(vectors.len());
    for v in vectors {
        if v.vector.len() != mean.vector.len() {
            return Err(TransferError::MeanDimension {
                mean_dim: mean.vector.len(),
                vector_dim: v.vector.len(),
            });
        }
        let centered: Vec<f32> = v
            .vector
            .iter()
            .zip(&mean.vector)
            .map(|(&x, &m)| (f64::from(x) - m) as f32)
            .collect();
        out.push(EmbeddingVector {
            id: v.id.clone(),
            vector: centered,
            modality: out_modality,
            normalized: false,
        });
    }
    Ok(out)
}

/// Mean of f64 rows (all length `dim`), compensated. Used by the gap
/// simulator, where f32 storage would eat the tolerance budget.
pub fn mean_rows_f64(rows: &[Vec<f64>], dim: usize) -> Option<Vec<f64>> {
    if rows.is_empty() {
        return None;
    }
    let mut acc = MeanAccumulator::new(dim);
    for row in rows {
        acc.push_row_f64(row);
    }
    let n = acc.count as f64;
    Some(acc.sums.iter().map(|s| s.value() / n).collect())
}

/// Rows minus their own mean, in f64.
pub fn center_rows_f64(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mean = mean_rows_f64(rows, first.len()).expect("non-empty");
    rows.iter()
        .map(|row| row.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(id: &str, values: &[f32]) -> EmbeddingVector {
        EmbeddingVector {
            id: id.into(),
            vector: values.to_vec(),
            modality: Modality::Text,
            normalized: false,
        }
    }

    #[test]
    fn mean_of_two_vectors() {
        let vs = [ev("a", &[1.0, 2.0]), ev("b", &[3.0, 4.0])];
        let m = mean_vector(vs.iter()).unwrap();
        assert_eq!(m.vector, vec![2.0, 3.0]);
        assert_eq!(m.sample_count, 2);
        assert_eq!(m.modality, Modality::Text);
    }

    #[test]
    fn mean_of_single_vector_is_identity() {
        let vs = [ev("a", &[0.25, -7.5, 3.0])];
        let m = mean_vector(vs.iter()).unwrap();
        assert_eq!(m.vector, vec![0.25, -7.5, 3.0]);
    }

    #[test]
    fn mean_rejects_empty_and_mixed() {
        assert!(matches!(
            mean_vector(std::iter::empty()),
            Err(TransferError::EmptyStream)
        ));
        let mut b = ev("b", &[1.0, 1.0]);
        b.modality = Modality::RealImage;
        let vs = [ev("a", &[0.0, 0.0]), b];
        assert!(matches!(
            mean_vector(vs.iter()),
            Err(TransferError::MixedModality { .. })
        ));
        let vs = [ev("a", &[0.0, 0.0]), ev("b", &[1.0])];
        assert!(matches!(
            mean_vector(vs.iter()),
            Err(TransferError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn compensated_mean_matches_high_precision_oracle() {
        // Brute-force oracle: exact rational accumulation over scaled
        // integers, independent of the compensated-summation path.
        let mut rng = crate::rng::SplitMix64::new(11);
        let n = 10_000;
        let dim = 4;
        let mut vectors = Vec::with_capacity(n);
        let mut int_sums = vec![0i128; dim];
        for i in 0..n {
            let mut row = Vec::with_capacity(dim);
            for sums in int_sums.iter_mut() {
                // Values on a 2^-20 grid are exact in f32 and f64, so the
                // integer-sum oracle is exact.
                let q = rng.next_below(1 << 21) as i128 - (1 << 20);
                *sums += q;
                row.push((q as f64 / (1u64 << 20) as f64) as f32);
            }
            vectors.push(ev(&format!("v{i}"), &row));
        }
        let mean = mean_vector(vectors.iter()).unwrap();
        for (got, &int_sum) in mean.vector.iter().zip(&int_sums) {
            let exact = int_sum as f64 / (1u64 << 20) as f64 / n as f64;
            let rel = if exact == 0.0 {
                got.abs()
            } else {
                ((got - exact) / exact).abs()
            };
            assert!(rel <= 1e-12, "got {got}, exact {exact}");
        }
    }

    #[test]
    fn sharded_merge_matches_single_pass() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..8).map(|_| rng.next_gaussian()).collect())
            .collect();
        let single = mean_rows_f64(&rows, 8).unwrap();
        let mut merged = MeanAccumulator::new(8);
        for chunk in rows.chunks(137) {
            let mut partial = MeanAccumulator::new(8);
            for row in chunk {
                partial.push_row_f64(row);
            }
            merged.merge(&partial).unwrap();
        }
        let n = merged.count as f64;
        for (s, expected) in merged.sums.iter().zip(&single) {
            assert!((s.value() / n - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesize_subtracts_mean_elementwise() {
        let vs = [ev("a", &[1.0, 2.0]), ev("b", &[3.0, 4.0])];
        let mean = mean_vector(vs.iter()).unwrap();
        let out = synthesize_image_reps(&vs, &mean).unwrap();
        assert_eq!(out[0].vector, vec![-1.0, -1.0]);
        assert_eq!(out[1].vector, vec![1.0, 1.0]);
        assert_eq!(out[0].id, "a");
        assert_eq!(out[0].modality, Modality::SyntheticImage);
        assert!(!out[0].normalized);
    }

    #[test]
    fn zero_mean_input_is_fixed_point() {
        let vs = [ev("a", &[1.0, -2.0]), ev("b", &[-1.0, 2.0])];
        let mean = mean_vector(vs.iter()).unwrap();
        let out = synthesize_image_reps(&vs, &mean).unwrap();
        for (orig, centered) in vs.iter().zip(&out) {
            assert_eq!(orig.vector, centered.vector);
        }
    }

    #[test]
    fn output_mean_is_zero() {
        let mut rng = crate::rng::SplitMix64::new(21);
        let vs: Vec<EmbeddingVector> = (0..500)
            .map(|i| {
                let row: Vec<f32> = (0..16).map(|_| rng.next_gaussian() as f32).collect();
                ev(&format!("v{i}"), &row)
            })
            .collect();
        let max_norm = vs.iter().map(|v| v.l2_norm()).fold(0.0, f64::max);
        let mean = mean_vector(vs.iter()).unwrap();
        let out = synthesize_image_reps(&vs, &mean).unwrap();
        let out_mean = mean_vector(out.iter()).unwrap();
        for &m in &out_mean.vector {
            assert!(m.abs() <= 1e-6 * max_norm, "residual mean {m}");
        }
    }

    #[test]
    fn inference_transform_preserves_pairwise_differences() {
        let vs = [
            EmbeddingVector {
                id: "r0".into(),
                vector: vec![5.0, 1.0],
                modality: Modality::RealImage,
                normalized: false,
            },
            EmbeddingVector {
                id: "r1".into(),
                vector: vec![7.0, -3.0],
                modality: Modality::RealImage,
                normalized: false,
            },
        ];
        let mean = mean_vector(vs.iter()).unwrap();
        let out = transform_inference_reps(&vs, &mean).unwrap();
        assert_eq!(out[0].modality, Modality::CenteredRealImage);
        for k in 0..2 {
            let before = vs[0].vector[k] - vs[1].vector[k];
            let after = out[0].vector[k] - out[1].vector[k];
            assert_eq!(before, after);
        }
    }

    #[test]
    fn single_zero_vector_centers_to_itself() {
        let vs = [EmbeddingVector {
            id: "r0".into(),
            vector: vec![0.0, 0.0],
            modality: Modality::RealImage,
            normalized: false,
        }];
        let mean = mean_vector(vs.iter()).unwrap();
        let out = transform_inference_reps(&vs, &mean).unwrap();
        assert_eq!(out[0].vector, vec![0.0, 0.0]);
    }

    #[test]
    fn centering_is_idempotent() {
        let mut rng = crate::rng::SplitMix64::new(33);
        let vs: Vec<EmbeddingVector> = (0..200)
            .map(|i| {
                let row: Vec<f32> = (0..8).map(|_| (rng.next_gaussian() + 3.0) as f32).collect();
                ev(&format!("v{i}"), &row)
            })
            .collect();
        let scale = vs.iter().map(|v| v.l2_norm()).fold(0.0, f64::max);
        let once = synthesize_image_reps(&vs, &mean_vector(vs.iter()).unwrap()).unwrap();
        let twice = synthesize_image_reps(&once, &mean_vector(once.iter()).unwrap()).unwrap();
        // Second-pass mean recenters what is already centered.
        for (a, b) in once.iter().zip(&twice) {
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert!((f64::from(*x) - f64::from(*y)).abs() <= 1e-6 * scale);
            }
        }
    }

    #[test]
    fn translation_invariance_of_centered_output() {
        let mut rng = crate::rng::SplitMix64::new(8);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..6).map(|_| rng.next_gaussian()).collect())
            .collect();
        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|x| x + 42.5).collect())
            .collect();
        let c0 = center_rows_f64(&rows);
        let c1 = center_rows_f64(&shifted);
        for (a, b) in c0.iter().flatten().zip(c1.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_dimension_mismatch_is_error() {
        let vs = [ev("a", &[1.0, 2.0])];
        let bad_mean = MeanVector {
            vector: vec![0.0; 3],
            sample_count: 1,
            modality: Modality::Text,
        };
        assert!(matches!(
            synthesize_image_reps(&vs, &bad_mean),
            Err(TransferError::MeanDimension { .. })
        ));
    }
}
