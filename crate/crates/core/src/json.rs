//! Canonical JSON and line-delimited JSON helpers.
//!
//! Canonical form: object keys sorted lexicographically, no insignificant
//! whitespace, UTF-8. Golden files and the manifest config hash depend on
//! this form being byte-stable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid JSON record: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Canonical JSON string of any serializable value.
///
/// Round-trips through `serde_json::Value`, whose object map is ordered,
/// so key order in the output is sorted regardless of struct field order.
pub fn canonical_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn canonical_sha256<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let s = canonical_string(value)?;
    let mut hasher = Sha256::new();
    hasher.update(s.as_bytes());
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Read a whole JSONL file into memory. Fails on the first bad line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(|e| JsonlError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| JsonlError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            source: e,
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Write records as one canonical JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    let io_err = |e| JsonlError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = canonical_string(record).map_err(|e| JsonlError::Parse {
            path: path.display().to_string(),
            line: 0,
            source: e,
        })?;
        writeln!(writer, "{line}").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

/// Append-mode JSONL writer that flushes after every record, used by
/// checkpoints, quarantine files, and the cost journal.
pub struct JsonlAppender {
    path: String,
    writer: BufWriter<File>,
}

impl JsonlAppender {
    pub fn open(path: &Path) -> Result<Self, JsonlError> {
        let file = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| JsonlError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        Ok(Self {
            path: path.display().to_string(),
            writer: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), JsonlError> {
        let line = canonical_string(record).map_err(|e| JsonlError::Parse {
            path: self.path.clone(),
            line: 0,
            source: e,
        })?;
        let io_err = |e| JsonlError::Io {
            path: self.path.clone(),
            source: e,
        };
        writeln!(self.writer, "{line}").map_err(io_err)?;
        self.writer.flush().map_err(io_err)
    }
}

/// Write `bytes` to `path` atomically (write to sibling temp file, rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
