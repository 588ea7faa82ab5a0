//! Stage 2: turn sampled captions into multi-turn instruction dialogues of
//! three task families, parse the model output against a fixed grammar,
//! and persist with the same checkpoint discipline as stage 1.
//!
//! Dialogue grammar expected from the model (and emitted by the mock):
//!
//! ```text
//! [Q] question text
//! A. option text          (multiple-choice turns only, labels A through D)
//! B. option text
//! C. option text
//! D. option text
//! Answer: C               (multiple-choice turns only)
//! [A] answer text         (open turns only; may continue on more lines)
//! ```
//!
//! A turn starts at each `[Q]` line. Validation enforces: at least one
//! turn, non-empty questions, exactly four distinctly labeled options with
//! exactly one correct answer for multiple choice, and no options on open
//! tasks.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::DiverseCaption;
use crate::checkpoint::{self, CheckpointError, CheckpointWriter, CompletionStatus};
use crate::gateway::{ChatPrompt, Gateway, GatewayError};
use crate::json::{self, JsonlAppender, JsonlError};
use crate::rng::SplitMix64;

/// Mock dispatch markers; each task template contains its marker verbatim.
pub const MC_MARKER: &str = "four options labeled";
pub const QA_MARKER: &str = "brief answer";
pub const CR_MARKER: &str = "multi-step reasoning";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    QuestionAnswering,
    ComplexReasoning,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::MultipleChoice,
        TaskKind::QuestionAnswering,
        TaskKind::ComplexReasoning,
    ];
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            TaskKind::MultipleChoice => "multiple_choice",
            TaskKind::QuestionAnswering => "question_answering",
            TaskKind::ComplexReasoning => "complex_reasoning",
        };
        f.write_str(name)
    }
}

/// Relative share of captions per task family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMix {
    pub multiple_choice: f64,
    pub question_answering: f64,
    pub complex_reasoning: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            multiple_choice: 171.0,
            question_answering: 199.0,
            complex_reasoning: 100.0,
        }
    }
}

impl TaskMix {
    pub fn weights(&self) -> [f64; 3] {
        [
            self.multiple_choice,
            self.question_answering,
            self.complex_reasoning,
        ]
    }

    pub fn validate(&self) -> Result<(), InstructError> {
        let w = self.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(InstructError::BadMix {
                reason: "weights must be finite and non-negative".into(),
            });
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(InstructError::BadMix {
                reason: "weights must sum to a positive value".into(),
            });
        }
        Ok(())
    }
}

/// One labeled option of a multiple-choice turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOption {
    pub label: String,
    pub text: String,
    pub correct: bool,
}

/// One question-answer turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<McOption>>,
}

/// One multi-turn instruction dialogue bound to a caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: String,
    pub caption_id: String,
    pub task: TaskKind,
    pub turns: Vec<Turn>,
}

impl InstructionSample {
    pub fn validate(&self) -> Result<(), DialogueViolation> {
        validate_turns(&self.turns, self.task)
    }
}

/// Structural rule violations, reported in first-violation order.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DialogueViolation {
    #[error("dialogue has no turns")]
    NoTurns,
    #[error("turn {turn}: empty question")]
    EmptyQuestion { turn: usize },
    #[error("turn {turn}: option count != 4 (got {got})")]
    OptionCount { turn: usize, got: usize },
    #[error("turn {turn}: duplicate option label {label}")]
    DuplicateOptionLabel { turn: usize, label: String },
    #[error("turn {turn}: option label {label} outside A-D")]
    BadOptionLabel { turn: usize, label: String },
    #[error("turn {turn}: missing answer")]
    MissingAnswer { turn: usize },
    #[error("turn {turn}: more than one answer marked")]
    MultipleAnswers { turn: usize },
    #[error("turn {turn}: answer letter {label} has no matching option")]
    AnswerNotAmongOptions { turn: usize, label: String },
    #[error("turn {turn}: options present on a non-multiple-choice task")]
    OptionsInOpenTask { turn: usize },
    #[error("turn {turn}: empty answer")]
    EmptyAnswer { turn: usize },
}

#[derive(Debug, Error)]
pub enum InstructError {
    #[error("invalid task mix: {reason}")]
    BadMix { reason: String },
    #[error("cannot allocate tasks over an empty caption list")]
    NoCaptions,
    #[error("gateway failure for caption {caption_id}: {source}")]
    Gateway {
        caption_id: String,
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

/// Proportional task counts for `n` captions by sequential highest
/// averages: each slot goes to the task maximizing weight/(assigned+1),
/// ties to the earlier task. Counts always sum to `n`.
pub fn task_counts(n: usize, mix: &TaskMix) -> Result<[usize; 3], InstructError> {
    mix.validate()?;
    let weights = mix.weights();
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let mut best = 0usize;
        let mut best_avg = f64::NEG_INFINITY;
        for (i, &w) in weights.iter().enumerate() {
            let avg = w / (counts[i] as f64 + 1.0);
            if avg > best_avg {
                best_avg = avg;
                best = i;
            }
        }
        counts[best] += 1;
    }
    Ok(counts)
}

/// Assign a task to every caption id: counts from [`task_counts`], spread
/// over a seeded permutation of the ids. Returns (id, task) pairs in the
/// input order of `caption_ids`.
pub fn allocate_tasks(
    caption_ids: &[String],
    mix: &TaskMix,
    rng_seed: u64,
) -> Result<Vec<(String, TaskKind)>, InstructError> {
    if caption_ids.is_empty() {
        return Err(InstructError::NoCaptions);
    }
    let counts = task_counts(caption_ids.len(), mix)?;
    let mut order: Vec<usize> = (0..caption_ids.len()).collect();
    let mut rng = SplitMix64::stream(rng_seed, 0);
    rng.shuffle(&mut order);

    let mut assigned: Vec<Option<TaskKind>> = vec![None; caption_ids.len()];
    let mut cursor = 0usize;
    for (kind, &count) in TaskKind::ALL.iter().zip(&counts) {
        for &index in &order[cursor..cursor + count] {
            assigned[index] = Some(*kind);
        }
        cursor += count;
    }
    Ok(caption_ids
        .iter()
        .zip(assigned)
        .map(|(id, task)| (id.clone(), task.expect("every index assigned")))
        .collect())
}

/// Build the task prompt for one caption. The caption text is embedded
/// verbatim; the template pins the output grammar.
pub fn build_task_prompt(caption: &DiverseCaption, task: TaskKind, turns: usize) -> ChatPrompt {
    let task_block = match task {
        TaskKind::MultipleChoice => format!(
            "Write multiple-choice questions about the described image. Each \
             question must have {MC_MARKER} \"A.\" \"B.\" \"C.\" \"D.\", \
             exactly one of them correct, followed by a line \"Answer: X\" \
             where X is the correct letter."
        ),
        TaskKind::QuestionAnswering => format!(
            "Write open-ended questions about the described image, each with \
             a {QA_MARKER} grounded only in the description, on a line \
             starting with \"[A] \"."
        ),
        TaskKind::ComplexReasoning => format!(
            "Write questions that require {CR_MARKER} or hypothetical \
             deductions about the described image. Give each full answer on \
             a line starting with \"[A] \", reasoning only from the \
             description."
        ),
    };
    let user = format!(
        "Below is a detailed image description.\n\
         \n\
         Description:\n\
         \"\"\"\n\
         {}\n\
         \"\"\"\n\
         \n\
         {task_block}\n\
         \n\
         Produce exactly {turns} turns. Start every question on its own \
         line with \"[Q] \". Every answer must be derivable from the \
         description alone. Output only the dialogue.",
        caption.text
    );
    ChatPrompt::user(user)
}

/// Parse raw model output into validated turns for `task`.
pub fn parse_dialogue(raw: &str, task: TaskKind) -> Result<Vec<Turn>, DialogueViolation> {
    struct RawTurn {
        question: String,
        options: Vec<(String, String)>,
        answer_letters: Vec<String>,
        free_answer: String,
    }

    let mut raw_turns: Vec<RawTurn> = Vec::new();
    let mut in_answer = false;
    for line in raw.lines() {
        let line = line.trim_end();
        if let Some(rest) = line.strip_prefix("[Q]") {
            raw_turns.push(RawTurn {
                question: rest.trim().to_string(),
                options: Vec::new(),
                answer_letters: Vec::new(),
                free_answer: String::new(),
            });
            in_answer = false;
            continue;
        }
        let Some(current) = raw_turns.last_mut() else {
            continue; // preamble before the first [Q]
        };
        if let Some(rest) = line.strip_prefix("[A]") {
            if !current.free_answer.is_empty() {
                current.free_answer.push(' ');
            }
            current.free_answer.push_str(rest.trim());
            in_answer = true;
        } else if let Some(rest) = line.strip_prefix("Answer:") {
            current.answer_letters.push(rest.trim().to_string());
            in_answer = false;
        } else if is_option_line(line) {
            let (label, text) = line.split_at(1);
            current
                .options
                .push((label.to_string(), text[1..].trim().to_string()));
            in_answer = false;
        } else if line.trim().is_empty() {
            in_answer = false;
        } else if in_answer {
            // answer continuation line
            current.free_answer.push(' ');
            current.free_answer.push_str(line.trim());
        } else if current.options.is_empty()
            && current.answer_letters.is_empty()
            && current.free_answer.is_empty()
        {
            // question continuation line
            if !current.question.is_empty() {
                current.question.push(' ');
            }
            current.question.push_str(line.trim());
        }
    }

    if raw_turns.is_empty() {
        return Err(DialogueViolation::NoTurns);
    }

    let mut turns = Vec::with_capacity(raw_turns.len());
    for (index, raw_turn) in raw_turns.into_iter().enumerate() {
        let turn_no = index + 1;
        match task {
            TaskKind::MultipleChoice => {
                if raw_turn.options.len() != 4 {
                    return Err(DialogueViolation::OptionCount {
                        turn: turn_no,
                        got: raw_turn.options.len(),
                    });
                }
                if raw_turn.answer_letters.is_empty() {
                    return Err(DialogueViolation::MissingAnswer { turn: turn_no });
                }
                if raw_turn.answer_letters.len() > 1 {
                    return Err(DialogueViolation::MultipleAnswers { turn: turn_no });
                }
                let letter = raw_turn.answer_letters[0].clone();
                let mut options = Vec::with_capacity(4);
                for (label, text) in &raw_turn.options {
                    options.push(McOption {
                        label: label.clone(),
                        text: text.clone(),
                        correct: *label == letter,
                    });
                }
                let answer = options
                    .iter()
                    .find(|o| o.correct)
                    .map(|o| o.text.clone())
                    .ok_or(DialogueViolation::AnswerNotAmongOptions {
                        turn: turn_no,
                        label: letter,
                    })?;
                turns.push(Turn {
                    question: raw_turn.question,
                    answer,
                    options: Some(options),
                });
            }
            TaskKind::QuestionAnswering | TaskKind::ComplexReasoning => {
                if !raw_turn.options.is_empty() {
                    return Err(DialogueViolation::OptionsInOpenTask { turn: turn_no });
                }
                if raw_turn.free_answer.is_empty() {
                    return Err(DialogueViolation::MissingAnswer { turn: turn_no });
                }
                turns.push(Turn {
                    question: raw_turn.question,
                    answer: raw_turn.free_answer,
                    options: None,
                });
            }
        }
    }
    validate_turns(&turns, task)?;
    Ok(turns)
}

fn is_option_line(line: &str) -> bool {
    let bytes = line.as_bytes();
    bytes.len() >= 2 && (b'A'..=b'Z').contains(&bytes[0]) && bytes[1] == b'.'
}

fn validate_turns(turns: &[Turn], task: TaskKind) -> Result<(), DialogueViolation> {
    if turns.is_empty() {
        return Err(DialogueViolation::NoTurns);
    }
    for (index, turn) in turns.iter().enumerate() {
        let turn_no = index + 1;
        if turn.question.trim().is_empty() {
            return Err(DialogueViolation::EmptyQuestion { turn: turn_no });
        }
        match task {
            TaskKind::MultipleChoice => {
                let options = turn.options.as_deref().unwrap_or(&[]);
                if options.len() != 4 {
                    return Err(DialogueViolation::OptionCount {
                        turn: turn_no,
                        got: options.len(),
                    });
                }
                let mut seen = Vec::new();
                for option in options {
                    if !["A", "B", "C", "D"].contains(&option.label.as_str()) {
                        return Err(DialogueViolation::BadOptionLabel {
                            turn: turn_no,
                            label: option.label.clone(),
                        });
                    }
                    if seen.contains(&option.label) {
                        return Err(DialogueViolation::DuplicateOptionLabel {
                            turn: turn_no,
                            label: option.label.clone(),
                        });
                    }
                    seen.push(option.label.clone());
                }
                let correct: Vec<&McOption> = options.iter().filter(|o| o.correct).collect();
                if correct.is_empty() {
                    return Err(DialogueViolation::MissingAnswer { turn: turn_no });
                }
                if correct.len() > 1 {
                    return Err(DialogueViolation::MultipleAnswers { turn: turn_no });
                }
                if correct[0].text != turn.answer {
                    return Err(DialogueViolation::AnswerNotAmongOptions {
                        turn: turn_no,
                        label: correct[0].label.clone(),
                    });
                }
            }
            TaskKind::QuestionAnswering | TaskKind::ComplexReasoning => {
                if turn.options.is_some() {
                    return Err(DialogueViolation::OptionsInOpenTask { turn: turn_no });
                }
                if turn.answer.trim().is_empty() {
                    return Err(DialogueViolation::EmptyAnswer { turn: turn_no });
                }
            }
        }
    }
    Ok(())
}

/// Quarantined dialogue: raw model text plus the violation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuarantinedDialogue {
    pub caption_id: String,
    pub task: TaskKind,
    pub raw_text: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Stage2Paths {
    pub output: PathBuf,
    pub quarantine: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
}

impl Stage2Paths {
    pub fn under(dir: &Path) -> Self {
        Self {
            output: dir.join("instruct.jsonl"),
            quarantine: dir.join("instruct.quarantine.jsonl"),
            checkpoint: dir.join("instruct.checkpoint.jsonl"),
            manifest: dir.join("stage2_manifest.json"),
        }
    }
}

pub use crate::caption::StageSummary;

/// Run stage 2 over `captions` with tasks assigned by `mix`. Parse
/// failures are retried up to `parse_retries` times, then quarantined.
/// Restart-safe like stage 1.
pub fn run_stage2(
    gateway: &Gateway,
    captions: &[DiverseCaption],
    mix: &TaskMix,
    turns: usize,
    parse_retries: u32,
    rng_seed: u64,
    paths: &Stage2Paths,
) -> Result<StageSummary, InstructError> {
    let mut summary = StageSummary {
        total_inputs: captions.len() as u64,
        ..StageSummary::default()
    };
    if captions.is_empty() {
        json::write_atomic(
            &paths.manifest,
            json::canonical_string(&summary).expect("serializes").as_bytes(),
        )
        .map_err(|e| InstructError::Io {
            path: paths.manifest.display().to_string(),
            source: e,
        })?;
        return Ok(summary);
    }

    let ids: Vec<String> = captions.iter().map(|c| c.id.clone()).collect();
    let assignment: HashMap<String, TaskKind> =
        allocate_tasks(&ids, mix, rng_seed)?.into_iter().collect();

    let mut done = checkpoint::load(&paths.checkpoint)?;
    let mut writer = CheckpointWriter::open(&paths.checkpoint)?;
    if paths.output.exists() {
        let persisted: Vec<InstructionSample> = json::read_jsonl(&paths.output)?;
        for sample in persisted {
            if !done.contains_key(&sample.caption_id) {
                writer.mark(&sample.caption_id, CompletionStatus::Accepted)?;
                done.insert(sample.caption_id, CompletionStatus::Accepted);
            }
        }
    }
    if paths.quarantine.exists() {
        let persisted: Vec<QuarantinedDialogue> = json::read_jsonl(&paths.quarantine)?;
        for record in persisted {
            if !done.contains_key(&record.caption_id) {
                writer.mark(&record.caption_id, CompletionStatus::Rejected)?;
                done.insert(record.caption_id, CompletionStatus::Rejected);
            }
        }
    }

    let mut output = JsonlAppender::open(&paths.output)?;
    let mut quarantine = JsonlAppender::open(&paths.quarantine)?;

    let pending: Vec<&DiverseCaption> = captions
        .iter()
        .filter(|c| !done.contains_key(&c.id))
        .collect();
    summary.skipped_from_checkpoint = captions.len() as u64 - pending.len() as u64;

    for chunk in pending.chunks(64) {
        let prompts: Vec<ChatPrompt> = chunk
            .iter()
            .map(|c| build_task_prompt(c, assignment[&c.id], turns))
            .collect();
        let first_attempts = gateway.complete_batch(&prompts);
        for (caption, first) in chunk.iter().zip(first_attempts) {
            let task = assignment[&caption.id];
            let mut attempt_text = match first {
                Ok(completion) => completion.text,
                Err(source) => {
                    return Err(InstructError::Gateway {
                        caption_id: caption.id.clone(),
                        source,
                    })
                }
            };
            let mut parsed = parse_dialogue(&attempt_text, task);
            let mut retries_left = parse_retries;
            while parsed.is_err() && retries_left > 0 {
                retries_left -= 1;
                let completion = gateway
                    .complete(&build_task_prompt(caption, task, turns))
                    .map_err(|source| InstructError::Gateway {
                        caption_id: caption.id.clone(),
                        source,
                    })?;
                attempt_text = completion.text;
                parsed = parse_dialogue(&attempt_text, task);
            }
            match parsed {
                Ok(parsed_turns) => {
                    let sample = InstructionSample {
                        id: format!("t-{}", caption.id),
                        caption_id: caption.id.clone(),
                        task,
                        turns: parsed_turns,
                    };
                    output.append(&sample)?;
                    writer.mark(&caption.id, CompletionStatus::Accepted)?;
                    done.insert(caption.id.clone(), CompletionStatus::Accepted);
                }
                Err(violation) => {
                    quarantine.append(&QuarantinedDialogue {
                        caption_id: caption.id.clone(),
                        task,
                        raw_text: attempt_text,
                        reason: violation.to_string(),
                    })?;
                    writer.mark(&caption.id, CompletionStatus::Rejected)?;
                    done.insert(caption.id.clone(), CompletionStatus::Rejected);
                }
            }
        }
    }

    for caption in captions {
        match done.get(&caption.id) {
            Some(CompletionStatus::Accepted) => summary.accepted += 1,
            Some(CompletionStatus::Rejected) => summary.rejected += 1,
            None => unreachable!(),
        }
    }
    json::write_atomic(
        &paths.manifest,
        json::canonical_string(&summary).expect("serializes").as_bytes(),
    )
    .map_err(|e| InstructError::Io {
        path: paths.manifest.display().to_string(),
        source: e,
    })?;
    Ok(summary)
}

/// Load persisted samples, re-validating every invariant.
pub fn load_samples(path: &Path) -> Result<Vec<InstructionSample>, JsonlError> {
    let samples: Vec<InstructionSample> = json::read_jsonl(path)?;
    for sample in &samples {
        if let Err(violation) = sample.validate() {
            return Err(JsonlError::Parse {
                path: path.display().to_string(),
                line: 0,
                source: serde::de::Error::custom(format!(
                    "sample {} violates dialogue rules: {violation}",
                    sample.id
                )),
            });
        }
    }
    Ok(samples)
}
