//! Shared text tokenization.
//!
//! Two tokenizers are used across the pipeline and they are intentionally
//! different:
//!
//! * [`word_count`] / [`words`]: trim, then split on Unicode whitespace with
//!   punctuation left attached. This is the counting rule used by seed
//!   filtering and caption length bounds.
//! * [`metric_tokens`]: lowercase, split on whitespace, then strip leading
//!   and trailing non-alphanumeric characters; empty tokens drop out. This
//!   is the rule behind every diversity metric so that committed fixture
//!   values stay stable.

/// Whitespace-delimited words of `text`, punctuation attached.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.trim().split_whitespace()
}

/// Number of whitespace-delimited words.
pub fn word_count(text: &str) -> usize {
    words(text).count()
}

/// Metric tokens: lowercased, edge punctuation stripped.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

/// Fraction of non-whitespace characters that are not alphabetic.
/// Returns 0 for text with no non-whitespace characters.
pub fn nonalpha_ratio(text: &str) -> f64 {
    let mut total = 0usize;
    let mut nonalpha = 0usize;
    for c in text.chars() {
        if c.is_whitespace() {
            continue;
        }
        total += 1;
        if !c.is_alphabetic() {
            nonalpha += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        nonalpha as f64 / total as f64
    }
}
