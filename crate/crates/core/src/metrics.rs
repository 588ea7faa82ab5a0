//! Corpus quality metrics: type-token ratio, unigram entropy, and length
//! statistics, with mergeable streaming state and a two-corpus comparison
//! report.
//!
//! Tokenizer (fixed so committed fixture values stay stable): lowercase,
//! split on whitespace, strip leading and trailing non-alphanumeric
//! characters, drop empties. Entropy sums run over tokens in sorted order,
//! which pins the floating-point result bit-for-bit across runs. All
//! counting state is integer and merges exactly across shards; the one
//! float accumulator (the per-sample TTR sum) is compensated, so sharded
//! and single-pass results agree to within 1e-12.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::metric_tokens;
use crate::transfer::CompensatedSum;

pub const TOKENIZER_ID: &str = "lowercase_ws_strip_edge_punct_v1";
pub const HISTOGRAM_BUCKET_WIDTH: u64 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtrMode {
    /// Mean over samples of unique/total. Stable across corpus sizes.
    PerSampleMean,
    /// Global unique/total. Shrinks as the corpus grows.
    CorpusLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyUnit {
    Nats,
    Bits,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics require a non-empty corpus")]
    EmptyCorpus,
    #[error("corpus contains no tokens under the metric tokenizer")]
    NoTokens,
    #[error("reports disagree on {field}: {a} vs {b}")]
    UnitMismatch {
        field: &'static str,
        a: String,
        b: String,
    },
}

/// Full metric report for one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sample_count: u64,
    pub ttr: f64,
    pub ttr_mode: TtrMode,
    pub entropy: f64,
    pub entropy_unit: EntropyUnit,
    pub length_min: u64,
    pub length_max: u64,
    pub length_mean: f64,
    /// (bucket_start, count) pairs; buckets of width 25 from 0,
    /// empty buckets omitted.
    pub length_histogram: Vec<(u64, u64)>,
    pub tokenizer: String,
}

/// Mergeable accumulator over corpus shards. Merge order does not affect
/// token counts; combine shards in a fixed order anyway so the derived
/// floating-point metrics stay bit-identical.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    token_counts: BTreeMap<String, u64>,
    sample_count: u64,
    total_tokens: u64,
    per_sample_ttr_sum: CompensatedSum,
    length_min: u64,
    length_max: u64,
    length_sum: u64,
    histogram: BTreeMap<u64, u64>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self {
            length_min: u64::MAX,
            ..Self::default()
        }
    }

    pub fn push(&mut self, text: &str) {
        let tokens = metric_tokens(text);
        let length = tokens.len() as u64;
        self.sample_count += 1;
        self.total_tokens += length;
        self.length_min = self.length_min.min(length);
        self.length_max = self.length_max.max(length);
        self.length_sum += length;
        *self
            .histogram
            .entry(length / HISTOGRAM_BUCKET_WIDTH * HISTOGRAM_BUCKET_WIDTH)
            .or_insert(0) += 1;

        let mut unique: BTreeMap<&str, u64> = BTreeMap::new();
        for token in &tokens {
            *unique.entry(token.as_str()).or_insert(0) += 1;
        }
        if length > 0 {
            self.per_sample_ttr_sum.add(unique.len() as f64 / length as f64);
        }
        for (token, count) in unique {
            *self.token_counts.entry(token.to_string()).or_insert(0) += count;
        }
    }

    pub fn merge(&mut self, other: MetricsAccumulator) {
        self.sample_count += other.sample_count;
        self.total_tokens += other.total_tokens;
        self.per_sample_ttr_sum.merge(other.per_sample_ttr_sum);
        self.length_min = self.length_min.min(other.length_min);
        self.length_max = self.length_max.max(other.length_max);
        self.length_sum += other.length_sum;
        for (bucket, count) in other.histogram {
            *self.histogram.entry(bucket).or_insert(0) += count;
        }
        for (token, count) in other.token_counts {
            *self.token_counts.entry(token).or_insert(0) += count;
        }
    }

    pub fn ttr(&self, mode: TtrMode) -> Result<f64, MetricsError> {
        if self.sample_count == 0 {
            return Err(MetricsError::EmptyCorpus);
        }
        match mode {
            TtrMode::PerSampleMean => Ok(self.per_sample_ttr_sum.value() / self.sample_count as f64),
            TtrMode::CorpusLevel => {
                if self.total_tokens == 0 {
                    return Err(MetricsError::NoTokens);
                }
                Ok(self.token_counts.len() as f64 / self.total_tokens as f64)
            }
        }
    }

    /// Shannon entropy of the corpus unigram distribution.
    pub fn entropy(&self, unit: EntropyUnit) -> Result<f64, MetricsError> {
        if self.sample_count == 0 {
            return Err(MetricsError::EmptyCorpus);
        }
        if self.total_tokens == 0 {
            return Err(MetricsError::NoTokens);
        }
        let total = self.total_tokens as f64;
        let mut nats = 0.0;
        for &count in self.token_counts.values() {
            let p = count as f64 / total;
            nats -= p * p.ln();
        }
        Ok(match unit {
            EntropyUnit::Nats => nats,
            EntropyUnit::Bits => nats / std::f64::consts::LN_2,
        })
    }

    pub fn finish(&self, ttr_mode: TtrMode, entropy_unit: EntropyUnit) -> Result<CorpusStats, MetricsError> {
        if self.sample_count == 0 {
            return Err(MetricsError::EmptyCorpus);
        }
        Ok(CorpusStats {
            sample_count: self.sample_count,
            ttr: self.ttr(ttr_mode)?,
            ttr_mode,
            entropy: self.entropy(entropy_unit)?,
            entropy_unit,
            length_min: self.length_min,
            length_max: self.length_max,
            length_mean: self.length_sum as f64 / self.sample_count as f64,
            length_histogram: self.histogram.iter().map(|(&b, &c)| (b, c)).collect(),
            tokenizer: TOKENIZER_ID.to_string(),
        })
    }
}

/// One-call stats over a text slice.
pub fn compute_corpus_stats<S: AsRef<str>>(
    corpus: &[S],
    ttr_mode: TtrMode,
    entropy_unit: EntropyUnit,
) -> Result<CorpusStats, MetricsError> {
    let mut acc = MetricsAccumulator::new();
    for text in corpus {
        acc.push(text.as_ref());
    }
    acc.finish(ttr_mode, entropy_unit)
}

/// One row of a comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
}

impl DeltaTable {
    /// Aligned plain-text rendering, two decimal places.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>12} {:>12} {:>12}\n",
            "metric", "a", "b", "a-b"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>12.2} {:>12.2} {:>+12.2}\n",
                row.metric, row.a, row.b, row.delta
            ));
        }
        out
    }
}

/// Per-metric differences between two reports. Units and tokenizer must
/// match.
pub fn compare_reports(a: &CorpusStats, b: &CorpusStats) -> Result<DeltaTable, MetricsError> {
    if a.entropy_unit != b.entropy_unit {
        return Err(MetricsError::UnitMismatch {
            field: "entropy_unit",
            a: format!("{:?}", a.entropy_unit),
            b: format!("{:?}", b.entropy_unit),
        });
    }
    if a.ttr_mode != b.ttr_mode {
        return Err(MetricsError::UnitMismatch {
            field: "ttr_mode",
            a: format!("{:?}", a.ttr_mode),
            b: format!("{:?}", b.ttr_mode),
        });
    }
    if a.tokenizer != b.tokenizer {
        return Err(MetricsError::UnitMismatch {
            field: "tokenizer",
            a: a.tokenizer.clone(),
            b: b.tokenizer.clone(),
        });
    }
    let rows = vec![
        DeltaRow {
            metric: "sample_count".into(),
            a: a.sample_count as f64,
            b: b.sample_count as f64,
            delta: a.sample_count as f64 - b.sample_count as f64,
        },
        DeltaRow {
            metric: "ttr".into(),
            a: a.ttr,
            b: b.ttr,
            delta: a.ttr - b.ttr,
        },
        DeltaRow {
            metric: "entropy".into(),
            a: a.entropy,
            b: b.entropy,
            delta: a.entropy - b.entropy,
        },
        DeltaRow {
            metric: "length_mean".into(),
            a: a.length_mean,
            b: b.length_mean,
            delta: a.length_mean - b.length_mean,
        },
    ];
    Ok(DeltaTable { rows })
}

/// Aligned plain-text rendering of one report.
pub fn render_stats_table(stats: &CorpusStats) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<14} {:>16}\n", "metric", "value"));
    out.push_str(&format!("{:<14} {:>16}\n", "samples", stats.sample_count));
    out.push_str(&format!("{:<14} {:>16.4}\n", "ttr", stats.ttr));
    out.push_str(&format!(
        "{:<14} {:>16.4}\n",
        format!("entropy({:?})", stats.entropy_unit).to_lowercase(),
        stats.entropy
    ));
    out.push_str(&format!("{:<14} {:>16}\n", "length_min", stats.length_min));
    out.push_str(&format!("{:<14} {:>16}\n", "length_max", stats.length_max));
    out.push_str(&format!("{:<14} {:>16.2}\n", "length_mean", stats.length_mean));
    out
}

/// Histogram as CSV with a header line.
pub fn histogram_csv(stats: &CorpusStats) -> String {
    let mut out = String::from("bucket_start,count\n");
    for (bucket, count) in &stats.length_histogram {
        out.push_str(&format!("{bucket},{count}\n"));
    }
    out
}
