//! Structured event log: one JSON object per line in the work directory,
//! mirrored human-readably to stderr.

use std::path::Path;

use serde_json::json;

use mirage_core::json::{JsonlAppender, JsonlError};
use mirage_core::pack::rfc3339_utc;

pub struct Logger {
    appender: JsonlAppender,
}

impl Logger {
    pub fn open(work_dir: &Path) -> Result<Self, JsonlError> {
        Ok(Self {
            appender: JsonlAppender::open(&work_dir.join("events.jsonl"))?,
        })
    }

    pub fn event(&mut self, name: &str, fields: serde_json::Value) {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::SystemTime::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let record = json!({
            "ts": rfc3339_utc(ts),
            "event": name,
            "fields": fields,
        });
        let _ = self.appender.append(&record);
        eprintln!("[{}] {name} {fields}", rfc3339_utc(ts));
    }
}
