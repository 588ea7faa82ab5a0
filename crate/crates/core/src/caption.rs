//! Stage 1: expand each seed into a detailed caption through the gateway,
//! validate length bounds, and persist with resumable checkpointing.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, CheckpointWriter, CompletionStatus};
use crate::gateway::{ChatPrompt, Gateway, GatewayError};
use crate::json::{self, JsonlAppender, JsonlError};
use crate::seed::CaptionSeed;
use crate::text;

/// Substring of the expansion template the mock backend keys on.
pub const EXPANSION_MARKER: &str = "detailed, self-contained image description";

/// One expanded caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiverseCaption {
    pub id: String,
    pub seed_id: String,
    pub text: String,
    pub token_count: usize,
    pub model_id: String,
}

impl DiverseCaption {
    /// token_count must agree with the corpus word-count rule.
    pub fn validate(&self) -> Result<(), CaptionError> {
        let actual = text::word_count(&self.text);
        if actual != self.token_count {
            return Err(CaptionError::TokenCountDrift {
                id: self.id.clone(),
                stored: self.token_count,
                actual,
            });
        }
        Ok(())
    }
}

/// Accepted word-count window for expansions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CaptionBounds {
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for CaptionBounds {
    fn default() -> Self {
        Self {
            min_tokens: 40,
            max_tokens: 520,
        }
    }
}

impl CaptionBounds {
    pub fn validate(&self) -> Result<(), CaptionError> {
        if self.min_tokens > self.max_tokens {
            return Err(CaptionError::BadBounds {
                min: self.min_tokens,
                max: self.max_tokens,
            });
        }
        Ok(())
    }

    pub fn contains(&self, tokens: usize) -> bool {
        (self.min_tokens..=self.max_tokens).contains(&tokens)
    }
}

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("caption bounds invalid: min {min} > max {max}")]
    BadBounds { min: usize, max: usize },
    #[error("caption {id}: stored token_count {stored} but text has {actual} words")]
    TokenCountDrift {
        id: String,
        stored: usize,
        actual: usize,
    },
    #[error("gateway failure for seed {seed_id}: {source}")]
    Gateway {
        seed_id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Build the expansion prompt for one seed. The seed text is embedded
/// verbatim between `"""` fences.
pub fn build_expansion_prompt(seed: &CaptionSeed) -> ChatPrompt {
    let user = format!(
        "You are given a short source caption describing an image.\n\
         \n\
         Source caption:\n\
         \"\"\"\n\
         {}\n\
         \"\"\"\n\
         \n\
         Rewrite it as one {EXPANSION_MARKER}. Add concrete visual detail \
         (colors, layout, lighting, foreground and background) while keeping \
         every fact stated in the source; do not contradict or drop any of \
         them. Output only the description.",
        seed.text
    );
    ChatPrompt::user(user)
}

/// Result of expanding one seed: a caption, or a recorded rejection.
#[derive(Debug)]
pub enum ExpandOutcome {
    Accepted(DiverseCaption),
    Rejected { reason: String, last_text: String },
}

/// Expand one seed. A completion outside `bounds` is retried up to
/// `bounds_retries` times before the seed is rejected.
pub fn expand_seed(
    gateway: &Gateway,
    seed: &CaptionSeed,
    bounds: &CaptionBounds,
    bounds_retries: u32,
) -> Result<ExpandOutcome, CaptionError> {
    bounds.validate()?;
    let prompt = build_expansion_prompt(seed);
    let mut last_text = String::new();
    let mut last_tokens = 0usize;
    for _ in 0..=bounds_retries {
        let completion = gateway.complete(&prompt).map_err(|source| CaptionError::Gateway {
            seed_id: seed.id.clone(),
            source,
        })?;
        let tokens = text::word_count(&completion.text);
        if bounds.contains(tokens) {
            return Ok(ExpandOutcome::Accepted(DiverseCaption {
                id: format!("c-{}", seed.id),
                seed_id: seed.id.clone(),
                text: completion.text,
                token_count: tokens,
                model_id: completion.model_id,
            }));
        }
        last_text = completion.text;
        last_tokens = tokens;
    }
    Ok(ExpandOutcome::Rejected {
        reason: format!(
            "token count {last_tokens} outside bounds [{}, {}]",
            bounds.min_tokens, bounds.max_tokens
        ),
        last_text,
    })
}

/// Quarantined expansion: caption-shaped record plus the rejection reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuarantinedCaption {
    pub id: String,
    pub seed_id: String,
    pub text: String,
    pub token_count: usize,
    pub model_id: String,
    pub reason: String,
}

/// File layout of one stage-1 run.
#[derive(Debug, Clone)]
pub struct Stage1Paths {
    pub output: PathBuf,
    pub quarantine: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
}

impl Stage1Paths {
    pub fn under(dir: &Path) -> Self {
        Self {
            output: dir.join("captions.jsonl"),
            quarantine: dir.join("captions.quarantine.jsonl"),
            checkpoint: dir.join("captions.checkpoint.jsonl"),
            manifest: dir.join("stage1_manifest.json"),
        }
    }
}

/// Counts for a completed stage-1 run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageSummary {
    pub total_inputs: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub skipped_from_checkpoint: u64,
}

/// Run stage 1 over `seeds`. Restart-safe: seeds already present in the
/// checkpoint (or already persisted) are never sent to the gateway again.
/// Gateway errors abort the run; completed work stays checkpointed.
pub fn run_stage1(
    gateway: &Gateway,
    seeds: &[CaptionSeed],
    bounds: &CaptionBounds,
    bounds_retries: u32,
    paths: &Stage1Paths,
) -> Result<StageSummary, CaptionError> {
    bounds.validate()?;
    let mut done = checkpoint::load(&paths.checkpoint)?;
    let mut writer = CheckpointWriter::open(&paths.checkpoint)?;

    // Records persisted without a checkpoint line (crash between the two
    // writes) count as completed.
    for id in persisted_seed_ids(&paths.output)? {
        if !done.contains_key(&id) {
            writer.mark(&id, CompletionStatus::Accepted)?;
            done.insert(id, CompletionStatus::Accepted);
        }
    }
    for id in persisted_quarantine_ids(&paths.quarantine)? {
        if !done.contains_key(&id) {
            writer.mark(&id, CompletionStatus::Rejected)?;
            done.insert(id, CompletionStatus::Rejected);
        }
    }

    let mut summary = StageSummary {
        total_inputs: seeds.len() as u64,
        ..StageSummary::default()
    };
    let mut output = JsonlAppender::open(&paths.output)?;
    let mut quarantine = JsonlAppender::open(&paths.quarantine)?;

    let pending: Vec<&CaptionSeed> = seeds
        .iter()
        .filter(|seed| !done.contains_key(&seed.id))
        .collect();
    summary.skipped_from_checkpoint = seeds.len() as u64 - pending.len() as u64;

    // First attempt for each chunk goes through the batched gateway path;
    // bounds-violation retries are rare and run inline.
    for chunk in pending.chunks(64) {
        let prompts: Vec<ChatPrompt> = chunk.iter().map(|s| build_expansion_prompt(s)).collect();
        let first_attempts = gateway.complete_batch(&prompts);
        for (seed, first) in chunk.iter().zip(first_attempts) {
            let outcome = match first {
                Ok(completion) => {
                    let tokens = text::word_count(&completion.text);
                    if bounds.contains(tokens) {
                        ExpandOutcome::Accepted(DiverseCaption {
                            id: format!("c-{}", seed.id),
                            seed_id: seed.id.clone(),
                            text: completion.text,
                            token_count: tokens,
                            model_id: completion.model_id,
                        })
                    } else if bounds_retries > 0 {
                        expand_seed(gateway, seed, bounds, bounds_retries - 1)?
                    } else {
                        ExpandOutcome::Rejected {
                            reason: format!(
                                "token count {tokens} outside bounds [{}, {}]",
                                bounds.min_tokens, bounds.max_tokens
                            ),
                            last_text: completion.text,
                        }
                    }
                }
                Err(source) => {
                    return Err(CaptionError::Gateway {
                        seed_id: seed.id.clone(),
                        source,
                    })
                }
            };
            match outcome {
                ExpandOutcome::Accepted(caption) => {
                    output.append(&caption)?;
                    writer.mark(&seed.id, CompletionStatus::Accepted)?;
                    done.insert(seed.id.clone(), CompletionStatus::Accepted);
                }
                ExpandOutcome::Rejected { reason, last_text } => {
                    let token_count = text::word_count(&last_text);
                    quarantine.append(&QuarantinedCaption {
                        id: format!("c-{}", seed.id),
                        seed_id: seed.id.clone(),
                        text: last_text,
                        token_count,
                        model_id: gateway.model_id().to_string(),
                        reason,
                    })?;
                    writer.mark(&seed.id, CompletionStatus::Rejected)?;
                    done.insert(seed.id.clone(), CompletionStatus::Rejected);
                }
            }
        }
    }

    for seed in seeds {
        match done.get(&seed.id) {
            Some(CompletionStatus::Accepted) => summary.accepted += 1,
            Some(CompletionStatus::Rejected) => summary.rejected += 1,
            None => unreachable!("every seed processed or checkpointed"),
        }
    }
    json::write_atomic(
        &paths.manifest,
        json::canonical_string(&summary)
            .expect("summary serializes")
            .as_bytes(),
    )
    .map_err(|e| CaptionError::Io {
        path: paths.manifest.display().to_string(),
        source: e,
    })?;
    Ok(summary)
}

fn persisted_seed_ids(path: &Path) -> Result<Vec<String>, CaptionError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let captions: Vec<DiverseCaption> = json::read_jsonl(path)?;
    Ok(captions.into_iter().map(|c| c.seed_id).collect())
}

fn persisted_quarantine_ids(path: &Path) -> Result<Vec<String>, CaptionError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let records: Vec<QuarantinedCaption> = json::read_jsonl(path)?;
    Ok(records.into_iter().map(|q| q.seed_id).collect())
}

/// Load persisted captions, re-validating token counts and seed-id
/// uniqueness.
pub fn load_captions(path: &Path) -> Result<Vec<DiverseCaption>, CaptionError> {
    let captions: Vec<DiverseCaption> = json::read_jsonl(path)?;
    let mut seen = HashSet::new();
    for caption in &captions {
        caption.validate()?;
        assert!(
            seen.insert(caption.seed_id.clone()),
            "duplicate seed_id {} in {}",
            caption.seed_id,
            path.display()
        );
    }
    Ok(captions)
}
