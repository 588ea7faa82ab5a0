//! Seed corpus construction: ingest raw caption records, filter them with
//! an explicit policy, deduplicate per source image, and expand
//! domain-label templates into additional seeds.

use std::collections::{BTreeMap, HashMap};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::text;

pub const LABEL_PLACEHOLDER: &str = "<label>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    ManualAnnotated,
    WebCrawled,
    DomainTemplate,
}

/// One textual seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSeed {
    pub id: String,
    pub text: String,
    pub source: SeedSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
}

impl CaptionSeed {
    /// Structural invariants: non-empty trimmed text, domain seeds carry a
    /// label and template id, manually annotated seeds carry an image key.
    pub fn validate(&self) -> Result<(), SeedError> {
        if self.text.trim().is_empty() {
            return Err(SeedError::EmptyText { id: self.id.clone() });
        }
        match self.source {
            SeedSource::DomainTemplate => {
                if self.domain_label.as_deref().map_or(true, str::is_empty)
                    || self.template_id.as_deref().map_or(true, str::is_empty)
                {
                    return Err(SeedError::IncompleteDomainSeed { id: self.id.clone() });
                }
            }
            SeedSource::ManualAnnotated => {
                if self.image_key.as_deref().map_or(true, str::is_empty) {
                    return Err(SeedError::MissingImageKey { id: self.id.clone() });
                }
            }
            SeedSource::WebCrawled => {}
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("seed {id}: text is empty after trimming")]
    EmptyText { id: String },
    #[error("seed {id}: domain-template seed without domain_label/template_id")]
    IncompleteDomainSeed { id: String },
    #[error("seed {id}: manually annotated seed without image_key")]
    MissingImageKey { id: String },
    #[error("invalid filter policy: {reason}")]
    BadPolicy { reason: String },
    #[error("template {index} in domain {domain:?} must contain \"{LABEL_PLACEHOLDER}\" exactly once (found {count})")]
    BadTemplate {
        domain: String,
        index: usize,
        count: usize,
    },
    #[error("domain {domain:?}: per_label_count {requested} exceeds template count {available}")]
    NotEnoughTemplates {
        domain: String,
        requested: usize,
        available: usize,
    },
    #[error("no template set for domain {domain:?}")]
    UnknownDomain { domain: String },
    #[error("invalid reject pattern {pattern:?}: {source}")]
    BadPattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
}

/// Quality filter for ingested captions. All thresholds are configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub max_nonalpha_ratio: f64,
    pub reject_patterns: Vec<String>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_tokens: 5,
            max_tokens: 100,
            max_nonalpha_ratio: 0.2,
            reject_patterns: vec![
                r"https?://".to_string(),
                r"www\.".to_string(),
                r"<[a-zA-Z/!][^>]*>".to_string(),
            ],
        }
    }
}

/// Policy with its reject patterns compiled.
pub struct CompiledPolicy {
    policy: FilterPolicy,
    patterns: Vec<Regex>,
}

impl CompiledPolicy {
    pub fn compile(policy: FilterPolicy) -> Result<Self, SeedError> {
        if policy.min_tokens < 1 {
            return Err(SeedError::BadPolicy {
                reason: "min_tokens must be at least 1".into(),
            });
        }
        if policy.min_tokens > policy.max_tokens {
            return Err(SeedError::BadPolicy {
                reason: format!(
                    "min_tokens {} exceeds max_tokens {}",
                    policy.min_tokens, policy.max_tokens
                ),
            });
        }
        if !(0.0..=1.0).contains(&policy.max_nonalpha_ratio) {
            return Err(SeedError::BadPolicy {
                reason: "max_nonalpha_ratio must lie in [0,1]".into(),
            });
        }
        let patterns = policy
            .reject_patterns
            .iter()
            .map(|p| {
                Regex::new(p).map_err(|source| SeedError::BadPattern {
                    pattern: p.clone(),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { policy, patterns })
    }

    /// Why `text` fails the policy, or None if it passes.
    pub fn rejection_reason(&self, text: &str) -> Option<RejectReason> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Some(RejectReason::EmptyText);
        }
        let tokens = text::word_count(trimmed);
        if tokens < self.policy.min_tokens {
            return Some(RejectReason::TooFewTokens);
        }
        if tokens > self.policy.max_tokens {
            return Some(RejectReason::TooManyTokens);
        }
        if text::nonalpha_ratio(trimmed) > self.policy.max_nonalpha_ratio {
            return Some(RejectReason::NonAlphaRatio);
        }
        for (regex, raw) in self.patterns.iter().zip(&self.policy.reject_patterns) {
            if regex.is_match(trimmed) {
                return Some(RejectReason::Pattern(raw.clone()));
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    Malformed,
    EmptyText,
    TooFewTokens,
    TooManyTokens,
    NonAlphaRatio,
    Pattern(String),
    InvalidSeed,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::Malformed => write!(f, "malformed_record"),
            RejectReason::EmptyText => write!(f, "empty_text"),
            RejectReason::TooFewTokens => write!(f, "too_few_tokens"),
            RejectReason::TooManyTokens => write!(f, "too_many_tokens"),
            RejectReason::NonAlphaRatio => write!(f, "nonalpha_ratio"),
            RejectReason::Pattern(p) => write!(f, "pattern:{p}"),
            RejectReason::InvalidSeed => write!(f, "invalid_seed"),
        }
    }
}

/// Raw input record, one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawCaptionRecord {
    pub text: String,
    pub source: SeedSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_label: Option<String>,
}

/// Counters for everything the ingest pass dropped, keyed by reason.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RejectionStats {
    pub input_records: u64,
    pub accepted: u64,
    pub rejected: BTreeMap<String, u64>,
}

impl RejectionStats {
    pub fn bump(&mut self, reason: &RejectReason) {
        *self.rejected.entry(reason.to_string()).or_insert(0) += 1;
    }

    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }
}

/// A parsed input line: a record, or a marker that the line was malformed.
pub enum IngestItem {
    Record(RawCaptionRecord),
    Malformed,
}

/// Filter a stream of parsed records into seeds.
///
/// Malformed lines are counted, never fatal. Ids are `s` plus the
/// zero-based input record index, so emission is deterministic in input
/// order and ids stay stable when the policy changes.
pub fn ingest_captions<I>(
    items: I,
    policy: &CompiledPolicy,
    stats: &mut RejectionStats,
) -> Vec<CaptionSeed>
where
    I: IntoIterator<Item = IngestItem>,
{
    let mut seeds = Vec::new();
    for item in items {
        let index = stats.input_records;
        stats.input_records += 1;
        let record = match item {
            IngestItem::Record(r) => r,
            IngestItem::Malformed => {
                stats.bump(&RejectReason::Malformed);
                continue;
            }
        };
        if let Some(reason) = policy.rejection_reason(&record.text) {
            stats.bump(&reason);
            continue;
        }
        let seed = CaptionSeed {
            id: format!("s{index:08}"),
            text: record.text.trim().to_string(),
            source: record.source,
            image_key: record.image_key,
            domain_label: record.domain_label,
            template_id: None,
        };
        if seed.validate().is_err() {
            stats.bump(&RejectReason::InvalidSeed);
            continue;
        }
        stats.accepted += 1;
        seeds.push(seed);
    }
    seeds
}

/// Keep at most one seed per image_key. Survivor: most words, ties broken
/// by lexicographically smallest text. Keyless seeds pass through.
/// Output preserves input order (each survivor sits at its own position).
pub fn dedupe_by_image(seeds: Vec<CaptionSeed>) -> Vec<CaptionSeed> {
    // index of current survivor per key
    let mut best: HashMap<String, usize> = HashMap::new();
    for (idx, seed) in seeds.iter().enumerate() {
        let Some(key) = seed.image_key.as_ref() else {
            continue;
        };
        match best.get(key) {
            None => {
                best.insert(key.clone(), idx);
            }
            Some(&winner) => {
                if beats(seed, &seeds[winner]) {
                    best.insert(key.clone(), idx);
                }
            }
        }
    }
    seeds
        .into_iter()
        .enumerate()
        .filter(|(idx, seed)| match &seed.image_key {
            None => true,
            Some(key) => best[key] == *idx,
        })
        .map(|(_, seed)| seed)
        .collect()
}

fn beats(challenger: &CaptionSeed, incumbent: &CaptionSeed) -> bool {
    let c = text::word_count(&challenger.text);
    let i = text::word_count(&incumbent.text);
    c > i || (c == i && challenger.text < incumbent.text)
}

/// Prompt templates for one domain. Each template carries the label
/// placeholder exactly once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateSet {
    pub domain: String,
    pub templates: Vec<String>,
    pub per_label_count: usize,
}

impl TemplateSet {
    pub fn new(
        domain: String,
        templates: Vec<String>,
        per_label_count: usize,
    ) -> Result<Self, SeedError> {
        for (index, template) in templates.iter().enumerate() {
            let count = template.matches(LABEL_PLACEHOLDER).count();
            if count != 1 {
                return Err(SeedError::BadTemplate {
                    domain: domain.clone(),
                    index,
                    count,
                });
            }
        }
        if per_label_count > templates.len() {
            return Err(SeedError::NotEnoughTemplates {
                domain,
                requested: per_label_count,
                available: templates.len(),
            });
        }
        Ok(Self {
            domain,
            templates,
            per_label_count,
        })
    }
}

/// One (domain, label) pair to expand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainLabel {
    pub domain: String,
    pub label: String,
}

/// Expand every label into `per_label_count` seeds by sampling that
/// domain's templates without replacement. Each label gets its own RNG
/// stream split from `rng_seed` by label index, so output is a pure
/// function of (labels, template sets, seed).
pub fn expand_domain_labels(
    labels: &[DomainLabel],
    template_sets: &HashMap<String, TemplateSet>,
    rng_seed: u64,
) -> Result<Vec<CaptionSeed>, SeedError> {
    let mut seeds = Vec::new();
    for (label_index, entry) in labels.iter().enumerate() {
        let set = template_sets
            .get(&entry.domain)
            .ok_or_else(|| SeedError::UnknownDomain {
                domain: entry.domain.clone(),
            })?;
        let mut rng = SplitMix64::stream(rng_seed, label_index as u64);
        let picks = rng.sample_indices(set.templates.len(), set.per_label_count);
        for (slot, template_index) in picks.into_iter().enumerate() {
            let template = &set.templates[template_index];
            let seed = CaptionSeed {
                id: format!("d{label_index:06}t{slot}"),
                text: template.replace(LABEL_PLACEHOLDER, &entry.label),
                source: SeedSource::DomainTemplate,
                image_key: None,
                domain_label: Some(entry.label.clone()),
                template_id: Some(format!("{}:{}", set.domain, template_index)),
            };
            debug_assert!(seed.validate().is_ok());
            seeds.push(seed);
        }
    }
    Ok(seeds)
}
