//! Append-only completion checkpoints for the resumable stages.
//!
//! Each completed input (accepted or quarantined) gets one JSON line
//! `{"id": ..., "status": ...}`. A restart loads the checkpoint, skips
//! every listed id, and therefore never repeats a gateway call. Output
//! records are flushed before their checkpoint line, so an id present in
//! the output but missing from the checkpoint means the process died
//! between the two writes; callers reconcile those ids as completed.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json::{JsonlAppender, JsonlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionStatus {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: String,
    pub status: CompletionStatus,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "checkpoint {path} is corrupted at line {line}: {detail}. \
         Recovery: truncate the file to its last valid record, e.g. \
         `head -n {keep} {path} > {path}.fixed && mv {path}.fixed {path}`, then re-run."
    )]
    Corrupted {
        path: String,
        line: usize,
        keep: usize,
        detail: String,
    },
    #[error(transparent)]
    Write(#[from] JsonlError),
}

/// Load completed ids. A missing file is an empty checkpoint.
pub fn load(path: &Path) -> Result<HashMap<String, CompletionStatus>, CheckpointError> {
    let mut done = HashMap::new();
    let content = match std::fs::read_to_string(path) {
        Ok(content) => content,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => {
            return Err(CheckpointError::Io {
                path: path.display().to_string(),
                source: e,
            })
        }
    };
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CheckpointRecord =
            serde_json::from_str(line).map_err(|e| CheckpointError::Corrupted {
                path: path.display().to_string(),
                line: idx + 1,
                keep: idx,
                detail: e.to_string(),
            })?;
        done.insert(record.id, record.status);
    }
    Ok(done)
}

/// Appender that flushes each record.
pub struct CheckpointWriter {
    appender: JsonlAppender,
}

impl CheckpointWriter {
    pub fn open(path: &Path) -> Result<Self, CheckpointError> {
        Ok(Self {
            appender: JsonlAppender::open(path)?,
        })
    }

    pub fn mark(&mut self, id: &str, status: CompletionStatus) -> Result<(), CheckpointError> {
        self.appender.append(&CheckpointRecord {
            id: id.to_string(),
            status,
        })?;
        Ok(())
    }
}
