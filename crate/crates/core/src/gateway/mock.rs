//! Deterministic mock chat backend.
//!
//! Completion text is a pure function of (prompt, seed): the content
//! stream is seeded by the FNV hash of the user message mixed with the
//! configured seed, so identical runs produce identical transcripts and
//! retries of the same prompt return the same text.
//!
//! In `Synthesize` mode the mock inspects the prompt for the pipeline's
//! template markers and answers in kind: expansion prompts get a filler
//! paragraph that starts with the quoted source text, dialogue prompts get
//! a correctly formatted dialogue for the requested task. Fault rules keyed
//! on marker substrings inject errors, malformed output, or transient
//! failures for tests.

use std::collections::HashMap;
use std::sync::Mutex;

use super::{approx_tokens, BackendCompletion, ChatBackend, ChatPrompt, GatewayError};
use crate::caption::EXPANSION_MARKER;
use crate::instruct::{CR_MARKER, MC_MARKER, QA_MARKER};
use crate::rng::{fnv1a64, mix64, SplitMix64};
use crate::text;

/// Filler vocabulary for generated text.
const WORDS: &[&str] = &[
    "amber", "light", "falls", "across", "the", "wooden", "table", "near", "a", "window",
    "where", "dust", "drifts", "slowly", "over", "faded", "blue", "curtains", "and", "small",
    "ceramic", "bowls", "hold", "ripe", "oranges", "beside", "an", "open", "notebook", "its",
    "pages", "curled", "at", "edges", "while", "shadows", "stretch", "toward", "brick", "wall",
    "painted", "pale", "green", "with", "framed", "maps", "of", "coastal", "towns", "hanging",
    "above", "low", "bench", "covered", "in", "woven", "cloth", "patterned", "red", "threads",
    "that", "catch", "morning", "sun", "streaming", "through", "glass", "onto", "tiled", "floor",
    "worn", "smooth", "by", "years", "quiet", "footsteps", "passing", "between", "tall", "shelves",
];

#[derive(Debug, Clone)]
pub enum MockBehavior {
    /// Reply with the user message reversed.
    EchoReversed,
    /// Reply with a fixed string.
    FixedText(String),
    /// Answer pipeline prompts according to their template markers.
    Synthesize,
}

/// Transient-failure rule: prompts containing `marker` fail with a 503 on
/// their first `failures` attempts.
#[derive(Debug, Clone)]
pub struct FlakyRule {
    pub marker: String,
    pub failures: u32,
}

#[derive(Debug, Clone)]
pub struct MockChatConfig {
    pub seed: u64,
    pub behavior: MockBehavior,
    /// Inclusive range of words for expansion paragraphs.
    pub expansion_words: (usize, usize),
    /// Prompts containing this marker fail with a non-retryable error.
    pub poison_marker: Option<String>,
    /// Prompts containing this marker get structurally broken output.
    pub malform_marker: Option<String>,
    pub flaky: Option<FlakyRule>,
}

impl Default for MockChatConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            behavior: MockBehavior::Synthesize,
            expansion_words: (60, 120),
            poison_marker: None,
            malform_marker: None,
            flaky: None,
        }
    }
}

pub struct MockChatBackend {
    config: MockChatConfig,
    attempts: Mutex<HashMap<u64, u32>>,
}

impl MockChatBackend {
    pub fn new(config: MockChatConfig) -> Self {
        Self {
            config,
            attempts: Mutex::new(HashMap::new()),
        }
    }

    fn content_stream(&self, user: &str) -> SplitMix64 {
        SplitMix64::new(mix64(self.config.seed ^ fnv1a64(user)))
    }

    fn generate(&self, prompt: &ChatPrompt) -> String {
        let user = &prompt.user;
        match &self.config.behavior {
            MockBehavior::EchoReversed => user.chars().rev().collect(),
            MockBehavior::FixedText(text) => text.clone(),
            MockBehavior::Synthesize => {
                let mut rng = self.content_stream(user);
                if user.contains(MC_MARKER) {
                    dialogue(&mut rng, requested_turns(user), DialogueKind::MultipleChoice)
                } else if user.contains(QA_MARKER) {
                    dialogue(&mut rng, requested_turns(user), DialogueKind::Open { answer_words: (8, 16) })
                } else if user.contains(CR_MARKER) {
                    dialogue(&mut rng, requested_turns(user), DialogueKind::Open { answer_words: (20, 34) })
                } else if user.contains(EXPANSION_MARKER) {
                    expansion(&mut rng, user, self.config.expansion_words)
                } else {
                    word_run(&mut rng, 24, 48)
                }
            }
        }
    }
}

impl ChatBackend for MockChatBackend {
    fn complete(&self, prompt: &ChatPrompt) -> Result<BackendCompletion, GatewayError> {
        if let Some(marker) = &self.config.poison_marker {
            if prompt.user.contains(marker.as_str()) {
                return Err(GatewayError::Backend {
                    detail: format!("mock poisoned by marker {marker:?}"),
                });
            }
        }
        if let Some(rule) = &self.config.flaky {
            if prompt.user.contains(rule.marker.as_str()) {
                let key = fnv1a64(&prompt.user);
                let mut attempts = self.attempts.lock().unwrap();
                let seen = attempts.entry(key).or_insert(0);
                if *seen < rule.failures {
                    *seen += 1;
                    return Err(GatewayError::Status {
                        status: 503,
                        detail: "mock transient failure".into(),
                    });
                }
            }
        }
        let text = if self
            .config
            .malform_marker
            .as_deref()
            .is_some_and(|m| prompt.user.contains(m))
        {
            // Three options and no answer line: structurally invalid.
            "[Q] what is shown here?\nA. a lantern\nB. a bucket\nC. a rope\n".to_string()
        } else {
            self.generate(prompt)
        };
        Ok(BackendCompletion {
            prompt_tokens: approx_tokens(prompt),
            completion_tokens: text::word_count(&text) as u64,
            text,
        })
    }
}

/// Turn count requested as "exactly N" in the prompt, default 3.
fn requested_turns(user: &str) -> usize {
    if let Some(pos) = user.find("exactly ") {
        let digits: String = user[pos + "exactly ".len()..]
            .chars()
            .take_while(|c| c.is_ascii_digit())
            .collect();
        if let Ok(n) = digits.parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    3
}

/// Source text quoted between `"""` fences, if any.
fn fenced_source(user: &str) -> Option<&str> {
    let start = user.find("\"\"\"")? + 3;
    let end = user[start..].find("\"\"\"")? + start;
    let inner = user[start..end].trim();
    (!inner.is_empty()).then_some(inner)
}

fn word_run(rng: &mut SplitMix64, min: usize, max: usize) -> String {
    let count = min + rng.next_below((max - min + 1) as u64) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(WORDS[rng.next_below(WORDS.len() as u64) as usize]);
    }
    out.join(" ")
}

fn expansion(rng: &mut SplitMix64, user: &str, range: (usize, usize)) -> String {
    let source = fenced_source(user).unwrap_or("");
    let source_words = text::word_count(source);
    let mut target = range.0 + rng.next_below((range.1 - range.0 + 1) as u64) as usize;
    if target < source_words + 5 {
        target = source_words + 5;
    }
    let filler = word_run(rng, target - source_words, target - source_words);
    if source.is_empty() {
        filler
    } else {
        format!("{source} {filler}")
    }
}

enum DialogueKind {
    MultipleChoice,
    Open { answer_words: (usize, usize) },
}

fn dialogue(rng: &mut SplitMix64, turns: usize, kind: DialogueKind) -> String {
    let mut out = String::new();
    for turn in 0..turns {
        if turn > 0 {
            out.push('\n');
        }
        let question = word_run(rng, 5, 9);
        out.push_str(&format!("[Q] {question}?\n"));
        match &kind {
            DialogueKind::MultipleChoice => {
                for label in ["A", "B", "C", "D"] {
                    let option = word_run(rng, 2, 4);
                    out.push_str(&format!("{label}. {option}\n"));
                }
                let correct = ["A", "B", "C", "D"][rng.next_below(4) as usize];
                out.push_str(&format!("Answer: {correct}\n"));
            }
            DialogueKind::Open { answer_words } => {
                let answer = word_run(rng, answer_words.0, answer_words.1);
                out.push_str(&format!("[A] {answer}.\n"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend(behavior: MockBehavior) -> MockChatBackend {
        MockChatBackend::new(MockChatConfig {
            behavior,
            ..MockChatConfig::default()
        })
    }

    #[test]
    fn echo_reversed() {
        let b = backend(MockBehavior::EchoReversed);
        let out = b.complete(&ChatPrompt::user("abc")).unwrap();
        assert_eq!(out.text, "cba");
    }

    #[test]
    fn pure_function_of_prompt_and_seed() {
        let b = backend(MockBehavior::Synthesize);
        let prompt = ChatPrompt::user(format!("{EXPANSION_MARKER}\n\"\"\"\na red bus\n\"\"\""));
        let first = b.complete(&prompt).unwrap();
        let second = b.complete(&prompt).unwrap();
        assert_eq!(first.text, second.text);

        let other_seed = MockChatBackend::new(MockChatConfig {
            seed: 99,
            ..MockChatConfig::default()
        });
        let third = other_seed.complete(&prompt).unwrap();
        assert_ne!(first.text, third.text);
    }

    #[test]
    fn expansion_embeds_source_and_respects_range() {
        let b = backend(MockBehavior::Synthesize);
        let prompt = ChatPrompt::user(format!(
            "{EXPANSION_MARKER}\n\"\"\"\na red bus on a street\n\"\"\""
        ));
        let out = b.complete(&prompt).unwrap();
        assert!(out.text.starts_with("a red bus on a street"));
        let n = text::word_count(&out.text);
        assert!((60..=120).contains(&n), "word count {n}");
    }

    #[test]
    fn poison_marker_errors() {
        let b = MockChatBackend::new(MockChatConfig {
            poison_marker: Some("POISON".into()),
            ..MockChatConfig::default()
        });
        assert!(b.complete(&ChatPrompt::user("fine prompt")).is_ok());
        assert!(matches!(
            b.complete(&ChatPrompt::user("has POISON inside")),
            Err(GatewayError::Backend { .. })
        ));
    }

    #[test]
    fn flaky_rule_fails_then_recovers() {
        let b = MockChatBackend::new(MockChatConfig {
            flaky: Some(FlakyRule {
                marker: "FLAKY".into(),
                failures: 2,
            }),
            ..MockChatConfig::default()
        });
        let prompt = ChatPrompt::user("FLAKY request");
        assert!(matches!(
            b.complete(&prompt),
            Err(GatewayError::Status { status: 503, .. })
        ));
        assert!(matches!(
            b.complete(&prompt),
            Err(GatewayError::Status { status: 503, .. })
        ));
        assert!(b.complete(&prompt).is_ok());
    }

    #[test]
    fn requested_turns_parsing() {
        assert_eq!(requested_turns("produce exactly 5 question-answer turns"), 5);
        assert_eq!(requested_turns("no count here"), 3);
        assert_eq!(requested_turns("exactly zero"), 3);
    }
}
