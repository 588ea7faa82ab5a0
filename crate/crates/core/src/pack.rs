//! Dataset assembly: bit-exact shards plus a manifest, and the verifier
//! that re-reads everything.
//!
//! Layout under one output directory:
//!
//! ```text
//! manifest.json                  written last, atomically; a directory
//!                                without it is not a dataset
//! captions-xxxxx.jsonl           pretraining text, canonical JSON lines
//! reps-xxxxx.unic                synthetic image representations
//! ids-xxxxx.txt                  caption ids, one per line, shard order
//! instruct-xxxxx.jsonl           instruction dialogues
//! reps-instr-xxxxx.unic          representations aligned to dialogues
//! ids-instr-xxxxx.txt            caption ids aligned to dialogues
//! means/<name>.unic              mean vectors (single-row shards)
//! means/<name>.json              sidecar {dim, count, modality}
//! ```
//!
//! The manifest records a CRC-64/XZ for every file; `verify_dataset`
//! checks existence, file checksums, internal shard checksums, record
//! counts, id alignment, and dialogue invariants.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::DiverseCaption;
use crate::embedding::{EmbeddingVector, Modality};
use crate::instruct::InstructionSample;
use crate::json::{self, JsonlError};
use crate::shard::{self, ShardError, ShardHeader, SHARD_VERSION};
use crate::transfer::MeanVector;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unpaired id at index {index}: left stream has {left}, right stream has {right}")]
    UnpairedId {
        index: usize,
        left: String,
        right: String,
    },
    #[error("aligned streams differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("vector {id} has dimension {got}, dataset dimension is {expected}")]
    DimMismatch {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("sample {id} violates dialogue rules: {detail}")]
    InvalidSample { id: String, detail: String },
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("invalid pack options: {reason}")]
    BadOptions { reason: String },
}

/// Deterministic token/cost totals carried into the manifest. Wall time
/// is deliberately not part of the manifest so identical runs stay
/// byte-identical.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CostSummary {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub dollars: f64,
}

#[derive(Debug, Clone)]
pub struct PackOptions {
    pub dataset_name: String,
    pub shard_size: usize,
    pub dim: u32,
    pub encoder_id: String,
    pub normalized: bool,
    pub config_hash: String,
    /// Fixed timestamp; falls back to SOURCE_DATE_EPOCH, then to now.
    pub created_at: Option<String>,
}

impl PackOptions {
    fn resolve_created_at(&self) -> String {
        if let Some(ts) = &self.created_at {
            return ts.clone();
        }
        if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
            if let Ok(secs) = epoch.trim().parse::<u64>() {
                return rfc3339_utc(secs);
            }
        }
        let now = std::time::SystemTime::now()
            .duration_since(std::time::SystemTime::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        rfc3339_utc(now)
    }
}

/// RFC 3339 UTC timestamp from Unix seconds.
pub fn rfc3339_utc(secs: u64) -> String {
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    let (year, month, day) = civil_from_days(days);
    format!(
        "{year:04}-{month:02}-{day:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        rem % 3600 / 60,
        rem % 60
    )
}

// days-to-date conversion for the proleptic Gregorian calendar
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let year = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let month = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if month <= 2 { year + 1 } else { year }, month, day)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub kind: String,
    pub count: u64,
    pub crc64: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub pretrain_pairs: u64,
    pub instruct_pairs: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub created_at: String,
    pub config_hash: String,
    pub encoder_id: String,
    pub dim: u32,
    pub format_version: u16,
    pub normalized: bool,
    pub counts: ManifestCounts,
    pub files: Vec<ManifestFile>,
    pub means: Vec<String>,
    pub cost: CostSummary,
}

/// Incremental dataset writer. Write the parts, then `finish` to seal the
/// manifest; a failed run leaves no manifest and `abort` removes what was
/// written.
pub struct DatasetWriter {
    out_dir: PathBuf,
    options: PackOptions,
    files: Vec<ManifestFile>,
    means: Vec<String>,
    counts: ManifestCounts,
    written: Vec<PathBuf>,
}

impl DatasetWriter {
    pub fn new(out_dir: &Path, options: PackOptions) -> Result<Self, PackError> {
        if options.shard_size == 0 {
            return Err(PackError::BadOptions {
                reason: "shard_size must be at least 1".into(),
            });
        }
        std::fs::create_dir_all(out_dir).map_err(|e| PackError::Io {
            path: out_dir.display().to_string(),
            source: e,
        })?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            options,
            files: Vec::new(),
            means: Vec::new(),
            counts: ManifestCounts::default(),
            written: Vec::new(),
        })
    }

    /// Pretraining pairs: captions and their synthetic representations,
    /// id-aligned.
    pub fn write_pretrain(
        &mut self,
        captions: &[DiverseCaption],
        reps: &[EmbeddingVector],
    ) -> Result<(), PackError> {
        if captions.len() != reps.len() {
            return Err(PackError::LengthMismatch {
                left: captions.len(),
                right: reps.len(),
            });
        }
        for (index, (caption, rep)) in captions.iter().zip(reps).enumerate() {
            if caption.id != rep.id {
                return Err(PackError::UnpairedId {
                    index,
                    left: caption.id.clone(),
                    right: rep.id.clone(),
                });
            }
        }
        self.counts.pretrain_pairs = captions.len() as u64;
        let shard_size = self.options.shard_size;
        for (shard_index, (caption_chunk, rep_chunk)) in captions
            .chunks(shard_size)
            .zip(reps.chunks(shard_size))
            .enumerate()
        {
            self.write_jsonl_shard(&format!("captions-{shard_index:05}.jsonl"), "captions", caption_chunk)?;
            self.write_rep_shard(&format!("reps-{shard_index:05}.unic"), "reps", rep_chunk)?;
            self.write_ids_file(
                &format!("ids-{shard_index:05}.txt"),
                "ids",
                rep_chunk.iter().map(|r| r.id.as_str()),
                rep_chunk.len() as u64,
            )?;
        }
        Ok(())
    }

    /// Instruction pairs: dialogues and the representation of each
    /// dialogue's caption, aligned (sample.caption_id == rep.id).
    pub fn write_instruct(
        &mut self,
        samples: &[InstructionSample],
        reps: &[EmbeddingVector],
    ) -> Result<(), PackError> {
        if samples.len() != reps.len() {
            return Err(PackError::LengthMismatch {
                left: samples.len(),
                right: reps.len(),
            });
        }
        for (index, (sample, rep)) in samples.iter().zip(reps).enumerate() {
            if sample.caption_id != rep.id {
                return Err(PackError::UnpairedId {
                    index,
                    left: sample.caption_id.clone(),
                    right: rep.id.clone(),
                });
            }
            sample.validate().map_err(|v| PackError::InvalidSample {
                id: sample.id.clone(),
                detail: v.to_string(),
            })?;
        }
        self.counts.instruct_pairs = samples.len() as u64;
        let shard_size = self.options.shard_size;
        for (shard_index, (sample_chunk, rep_chunk)) in samples
            .chunks(shard_size)
            .zip(reps.chunks(shard_size))
            .enumerate()
        {
            self.write_jsonl_shard(
                &format!("instruct-{shard_index:05}.jsonl"),
                "instruct",
                sample_chunk,
            )?;
            self.write_rep_shard(
                &format!("reps-instr-{shard_index:05}.unic"),
                "reps_instr",
                rep_chunk,
            )?;
            self.write_ids_file(
                &format!("ids-instr-{shard_index:05}.txt"),
                "ids_instr",
                rep_chunk.iter().map(|r| r.id.as_str()),
                rep_chunk.len() as u64,
            )?;
        }
        Ok(())
    }

    /// Persist a mean vector as a single-row shard plus JSON sidecar.
    pub fn write_mean(&mut self, name: &str, mean: &MeanVector) -> Result<(), PackError> {
        let means_dir = self.out_dir.join("means");
        std::fs::create_dir_all(&means_dir).map_err(|e| PackError::Io {
            path: means_dir.display().to_string(),
            source: e,
        })?;
        let rel_unic = format!("means/{name}.unic");
        let path = self.out_dir.join(&rel_unic);
        let row: Vec<f32> = mean.vector.iter().map(|&x| x as f32).collect();
        shard::write_shard(
            &path,
            &ShardHeader {
                version: SHARD_VERSION,
                dim: row.len() as u32,
                count: 1,
                modality: mean.modality,
                normalized: false,
            },
            &[row],
        )?;
        self.written.push(path.clone());
        self.push_file_entry(&rel_unic, "mean", 1)?;

        #[derive(Serialize)]
        struct Sidecar {
            dim: usize,
            count: u64,
            modality: Modality,
        }
        let rel_json = format!("means/{name}.json");
        let sidecar_path = self.out_dir.join(&rel_json);
        let body = json::canonical_string(&Sidecar {
            dim: mean.vector.len(),
            count: mean.sample_count,
            modality: mean.modality,
        })
        .expect("sidecar serializes");
        std::fs::write(&sidecar_path, body.as_bytes()).map_err(|e| PackError::Io {
            path: sidecar_path.display().to_string(),
            source: e,
        })?;
        self.written.push(sidecar_path);
        self.push_file_entry(&rel_json, "mean_sidecar", 1)?;
        self.means.push(rel_unic);
        Ok(())
    }

    /// Seal the dataset: write the manifest atomically, last.
    pub fn finish(self, cost: CostSummary) -> Result<Manifest, PackError> {
        let manifest = Manifest {
            dataset_name: self.options.dataset_name.clone(),
            created_at: self.options.resolve_created_at(),
            config_hash: self.options.config_hash.clone(),
            encoder_id: self.options.encoder_id.clone(),
            dim: self.options.dim,
            format_version: SHARD_VERSION,
            normalized: self.options.normalized,
            counts: self.counts.clone(),
            files: self.files.clone(),
            means: self.means.clone(),
            cost,
        };
        let path = self.out_dir.join("manifest.json");
        let body = json::canonical_string(&manifest).expect("manifest serializes");
        json::write_atomic(&path, body.as_bytes()).map_err(|e| PackError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(manifest)
    }

    /// Remove everything written so far (failure cleanup).
    pub fn abort(self) {
        for path in &self.written {
            let _ = std::fs::remove_file(path);
        }
    }

    fn write_jsonl_shard<T: Serialize>(
        &mut self,
        rel: &str,
        kind: &str,
        records: &[T],
    ) -> Result<(), PackError> {
        let path = self.out_dir.join(rel);
        json::write_jsonl(&path, records)?;
        self.written.push(path);
        self.push_file_entry(rel, kind, records.len() as u64)
    }

    fn write_rep_shard(
        &mut self,
        rel: &str,
        kind: &str,
        reps: &[EmbeddingVector],
    ) -> Result<(), PackError> {
        let dim = self.options.dim;
        for rep in reps {
            if rep.vector.len() != dim as usize {
                return Err(PackError::DimMismatch {
                    id: rep.id.clone(),
                    got: rep.vector.len(),
                    expected: dim as usize,
                });
            }
        }
        let modality = reps.first().map(|r| r.modality).unwrap_or(Modality::SyntheticImage);
        let normalized = reps.first().map(|r| r.normalized).unwrap_or(false);
        let rows: Vec<Vec<f32>> = reps.iter().map(|r| r.vector.clone()).collect();
        let path = self.out_dir.join(rel);
        shard::write_shard(
            &path,
            &ShardHeader {
                version: SHARD_VERSION,
                dim,
                count: rows.len() as u64,
                modality,
                normalized,
            },
            &rows,
        )?;
        self.written.push(path);
        self.push_file_entry(rel, kind, reps.len() as u64)
    }

    fn write_ids_file<'a>(
        &mut self,
        rel: &str,
        kind: &str,
        ids: impl Iterator<Item = &'a str>,
        count: u64,
    ) -> Result<(), PackError> {
        let path = self.out_dir.join(rel);
        let mut body = String::new();
        for id in ids {
            body.push_str(id);
            body.push('\n');
        }
        std::fs::write(&path, body.as_bytes()).map_err(|e| PackError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.written.push(path);
        self.push_file_entry(rel, kind, count)
    }

    fn push_file_entry(&mut self, rel: &str, kind: &str, count: u64) -> Result<(), PackError> {
        let crc = file_crc64(&self.out_dir.join(rel))?;
        self.files.push(ManifestFile {
            path: rel.to_string(),
            kind: kind.to_string(),
            count,
            crc64: crc,
        });
        Ok(())
    }
}

pub fn file_crc64(path: &Path) -> Result<u64, PackError> {
    let bytes = std::fs::read(path).map_err(|e| PackError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(shard::crc64_xz(&bytes))
}

/// Convenience wrapper for a captions-only dataset.
pub fn write_pretrain_dataset(
    captions: &[DiverseCaption],
    reps: &[EmbeddingVector],
    out_dir: &Path,
    options: PackOptions,
) -> Result<Manifest, PackError> {
    let mut writer = DatasetWriter::new(out_dir, options)?;
    if let Err(e) = writer.write_pretrain(captions, reps) {
        writer.abort();
        return Err(e);
    }
    writer.finish(CostSummary::default())
}

/// Convenience wrapper for an instruction-only dataset.
pub fn write_instruct_dataset(
    samples: &[InstructionSample],
    reps: &[EmbeddingVector],
    out_dir: &Path,
    options: PackOptions,
) -> Result<Manifest, PackError> {
    let mut writer = DatasetWriter::new(out_dir, options)?;
    if let Err(e) = writer.write_instruct(samples, reps) {
        writer.abort();
        return Err(e);
    }
    writer.finish(CostSummary::default())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileCheck {
    pub path: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<FileCheck>,
}

/// Re-read a packed dataset and check every invariant the manifest pins.
pub fn verify_dataset(out_dir: &Path) -> Result<VerifyReport, PackError> {
    let manifest_path = out_dir.join("manifest.json");
    let manifest_bytes = std::fs::read(&manifest_path).map_err(|e| PackError::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| PackError::BadOptions {
            reason: format!("manifest does not parse: {e}"),
        })?;

    let mut checks = Vec::new();
    let mut check = |path: &str, ok: bool, detail: String| {
        checks.push(FileCheck {
            path: path.to_string(),
            ok,
            detail,
        });
    };

    let mut caption_ids: Vec<String> = Vec::new();
    let mut rep_ids: Vec<String> = Vec::new();
    let mut instr_caption_ids: Vec<String> = Vec::new();
    let mut instr_rep_ids: Vec<String> = Vec::new();
    let mut caption_total = 0u64;
    let mut rep_total = 0u64;
    let mut instruct_total = 0u64;
    let mut instr_rep_total = 0u64;

    for entry in &manifest.files {
        let path = out_dir.join(&entry.path);
        if !path.exists() {
            check(&entry.path, false, "missing".into());
            continue;
        }
        match file_crc64(&path) {
            Ok(crc) if crc == entry.crc64 => {}
            Ok(crc) => {
                check(
                    &entry.path,
                    false,
                    format!("file checksum mismatch: stored {:#x}, computed {crc:#x}", entry.crc64),
                );
                continue;
            }
            Err(e) => {
                check(&entry.path, false, e.to_string());
                continue;
            }
        }
        let result: Result<String, String> = match entry.kind.as_str() {
            "captions" => json::read_jsonl::<DiverseCaption>(&path)
                .map_err(|e| e.to_string())
                .and_then(|records| {
                    for record in &records {
                        record.validate().map_err(|e| e.to_string())?;
                    }
                    if records.len() as u64 != entry.count {
                        return Err(format!(
                            "count mismatch: manifest {}, file {}",
                            entry.count,
                            records.len()
                        ));
                    }
                    caption_total += records.len() as u64;
                    caption_ids.extend(records.into_iter().map(|c| c.id));
                    Ok("captions valid".into())
                }),
            "instruct" => json::read_jsonl::<InstructionSample>(&path)
                .map_err(|e| e.to_string())
                .and_then(|records| {
                    for record in &records {
                        record.validate().map_err(|e| e.to_string())?;
                    }
                    if records.len() as u64 != entry.count {
                        return Err(format!(
                            "count mismatch: manifest {}, file {}",
                            entry.count,
                            records.len()
                        ));
                    }
                    instruct_total += records.len() as u64;
                    instr_caption_ids.extend(records.into_iter().map(|s| s.caption_id));
                    Ok("dialogues valid".into())
                }),
            "reps" | "reps_instr" | "mean" => shard::read_shard(&path)
                .map_err(|e| e.to_string())
                .and_then(|(header, rows)| {
                    if header.count != entry.count {
                        return Err(format!(
                            "count mismatch: manifest {}, shard {}",
                            entry.count, header.count
                        ));
                    }
                    if entry.kind != "mean" && header.dim != manifest.dim {
                        return Err(format!(
                            "dim mismatch: manifest {}, shard {}",
                            manifest.dim, header.dim
                        ));
                    }
                    match entry.kind.as_str() {
                        "reps" => rep_total += rows.len() as u64,
                        "reps_instr" => instr_rep_total += rows.len() as u64,
                        _ => {}
                    }
                    Ok(format!("{} rows, checksum ok", rows.len()))
                }),
            "ids" | "ids_instr" => std::fs::read_to_string(&path)
                .map_err(|e| e.to_string())
                .and_then(|body| {
                    let ids: Vec<String> = body.lines().map(str::to_string).collect();
                    if ids.len() as u64 != entry.count {
                        return Err(format!(
                            "count mismatch: manifest {}, file {}",
                            entry.count,
                            ids.len()
                        ));
                    }
                    if entry.kind == "ids" {
                        rep_ids.extend(ids);
                    } else {
                        instr_rep_ids.extend(ids);
                    }
                    Ok("ids present".into())
                }),
            "mean_sidecar" => std::fs::read_to_string(&path)
                .map_err(|e| e.to_string())
                .and_then(|body| {
                    serde_json::from_str::<serde_json::Value>(&body)
                        .map_err(|e| e.to_string())
                        .map(|_| "sidecar parses".into())
                }),
            other => Err(format!("unknown file kind {other:?}")),
        };
        match result {
            Ok(detail) => check(&entry.path, true, detail),
            Err(detail) => check(&entry.path, false, detail),
        }
    }

    // cross-file consistency
    let mut cross = |name: &str, ok: bool, detail: String| {
        checks.push(FileCheck {
            path: name.to_string(),
            ok,
            detail,
        });
    };
    cross(
        "pretrain_pairs",
        caption_total == manifest.counts.pretrain_pairs && rep_total == manifest.counts.pretrain_pairs,
        format!(
            "manifest {}, captions {}, reps {}",
            manifest.counts.pretrain_pairs, caption_total, rep_total
        ),
    );
    cross(
        "pretrain_alignment",
        caption_ids == rep_ids,
        format!("{} caption ids vs {} rep ids", caption_ids.len(), rep_ids.len()),
    );
    cross(
        "instruct_pairs",
        instruct_total == manifest.counts.instruct_pairs
            && instr_rep_total == manifest.counts.instruct_pairs,
        format!(
            "manifest {}, dialogues {}, reps {}",
            manifest.counts.instruct_pairs, instruct_total, instr_rep_total
        ),
    );
    cross(
        "instruct_alignment",
        instr_caption_ids == instr_rep_ids,
        format!(
            "{} dialogue caption ids vs {} rep ids",
            instr_caption_ids.len(),
            instr_rep_ids.len()
        ),
    );

    Ok(VerifyReport {
        passed: checks.iter().all(|c| c.ok),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruct::{McOption, TaskKind, Turn};

    fn caption(i: usize) -> DiverseCaption {
        let text = format!("a packed scene number {i} with several concrete objects");
        DiverseCaption {
            id: format!("c{i:05}"),
            seed_id: format!("s{i:05}"),
            token_count: crate::text::word_count(&text),
            text,
            model_id: "mock-llm".into(),
        }
    }

    fn rep(id: &str, dim: usize, fill: f32) -> EmbeddingVector {
        EmbeddingVector {
            id: id.into(),
            vector: (0..dim).map(|k| fill + k as f32 * 0.25).collect(),
            modality: Modality::SyntheticImage,
            normalized: false,
        }
    }

    fn sample(i: usize) -> InstructionSample {
        InstructionSample {
            id: format!("t-c{i:05}"),
            caption_id: format!("c{i:05}"),
            task: TaskKind::MultipleChoice,
            turns: vec![Turn {
                question: "what is shown?".into(),
                answer: "a bench".into(),
                options: Some(vec![
                    McOption { label: "A".into(), text: "a bench".into(), correct: true },
                    McOption { label: "B".into(), text: "a kettle".into(), correct: false },
                    McOption { label: "C".into(), text: "a rope".into(), correct: false },
                    McOption { label: "D".into(), text: "a ladder".into(), correct: false },
                ]),
            }],
        }
    }

    fn options() -> PackOptions {
        PackOptions {
            dataset_name: "unit-test".into(),
            shard_size: 64,
            dim: 8,
            encoder_id: "mock-encoder".into(),
            normalized: false,
            config_hash: "deadbeef".into(),
            created_at: Some("2025-01-01T00:00:00Z".into()),
        }
    }

    #[test]
    fn rfc3339_reference_values() {
        assert_eq!(rfc3339_utc(0), "1970-01-01T00:00:00Z");
        assert_eq!(rfc3339_utc(1_609_459_200), "2021-01-01T00:00:00Z");
        assert_eq!(rfc3339_utc(951_827_696), "2000-02-29T12:34:56Z");
    }

    #[test]
    fn pretrain_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let captions: Vec<DiverseCaption> = (0..200).map(caption).collect();
        let reps: Vec<EmbeddingVector> = captions
            .iter()
            .enumerate()
            .map(|(i, c)| rep(&c.id, 8, i as f32 * 0.125 - 3.0))
            .collect();
        let manifest =
            write_pretrain_dataset(&captions, &reps, dir.path(), options()).unwrap();
        assert_eq!(manifest.counts.pretrain_pairs, 200);

        // re-read all rep shards and compare bits
        let mut rows = Vec::new();
        for entry in manifest.files.iter().filter(|f| f.kind == "reps") {
            let (_, shard_rows) = shard::read_shard(&dir.path().join(&entry.path)).unwrap();
            rows.extend(shard_rows);
        }
        assert_eq!(rows.len(), 200);
        for (orig, back) in reps.iter().zip(&rows) {
            for (a, b) in orig.vector.iter().zip(back) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let report = verify_dataset(dir.path()).unwrap();
        assert!(report.passed, "{:#?}", report.checks);
    }

    #[test]
    fn shard_size_splits_files() {
        let dir = tempfile::tempdir().unwrap();
        let captions: Vec<DiverseCaption> = (0..150).map(caption).collect();
        let reps: Vec<EmbeddingVector> =
            captions.iter().map(|c| rep(&c.id, 8, 1.0)).collect();
        let manifest =
            write_pretrain_dataset(&captions, &reps, dir.path(), options()).unwrap();
        let rep_files: Vec<_> = manifest.files.iter().filter(|f| f.kind == "reps").collect();
        assert_eq!(rep_files.len(), 3); // 64 + 64 + 22
        assert_eq!(rep_files.iter().map(|f| f.count).sum::<u64>(), 150);
        assert!(verify_dataset(dir.path()).unwrap().passed);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_pretrain_dataset(&[], &[], dir.path(), options()).unwrap();
        assert_eq!(manifest.counts.pretrain_pairs, 0);
        assert!(verify_dataset(dir.path()).unwrap().passed);
    }

    #[test]
    fn unpaired_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let captions: Vec<DiverseCaption> = (0..3).map(caption).collect();
        let mut reps: Vec<EmbeddingVector> =
            captions.iter().map(|c| rep(&c.id, 8, 0.0)).collect();
        reps[1].id = "c-intruder".into();
        let err = write_pretrain_dataset(&captions, &reps, dir.path(), options()).unwrap_err();
        match err {
            PackError::UnpairedId { index, left, right } => {
                assert_eq!(index, 1);
                assert_eq!(left, "c00001");
                assert_eq!(right, "c-intruder");
            }
            other => panic!("unexpected {other:?}"),
        }
        // aborted: no manifest
        assert!(!dir.path().join("manifest.json").exists());
    }

    #[test]
    fn instruct_roundtrip_and_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<InstructionSample> = (0..40).map(sample).collect();
        let reps: Vec<EmbeddingVector> = samples
            .iter()
            .map(|s| rep(&s.caption_id, 8, 2.0))
            .collect();
        let manifest = write_instruct_dataset(&samples, &reps, dir.path(), options()).unwrap();
        assert_eq!(manifest.counts.instruct_pairs, 40);
        let report = verify_dataset(dir.path()).unwrap();
        assert!(report.passed, "{:#?}", report.checks);
    }

    #[test]
    fn invalid_sample_rejected_at_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = sample(0);
        bad.turns[0].options.as_mut().unwrap().pop();
        let reps = vec![rep(&bad.caption_id, 8, 0.0)];
        assert!(matches!(
            write_instruct_dataset(&[bad], &reps, dir.path(), options()),
            Err(PackError::InvalidSample { .. })
        ));
    }

    #[test]
    fn corrupted_shard_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        let captions: Vec<DiverseCaption> = (0..10).map(caption).collect();
        let reps: Vec<EmbeddingVector> =
            captions.iter().map(|c| rep(&c.id, 8, 0.5)).collect();
        write_pretrain_dataset(&captions, &reps, dir.path(), options()).unwrap();

        let shard_path = dir.path().join("reps-00000.unic");
        let mut bytes = std::fs::read(&shard_path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&shard_path, bytes).unwrap();

        let report = verify_dataset(dir.path()).unwrap();
        assert!(!report.passed);
        let failing = report
            .checks
            .iter()
            .find(|c| c.path == "reps-00000.unic")
            .unwrap();
        assert!(!failing.ok);
        assert!(failing.detail.contains("checksum"), "{}", failing.detail);
    }

    #[test]
    fn truncated_shard_reports_length() {
        let dir = tempfile::tempdir().unwrap();
        let captions: Vec<DiverseCaption> = (0..5).map(caption).collect();
        let reps: Vec<EmbeddingVector> =
            captions.iter().map(|c| rep(&c.id, 8, 0.5)).collect();
        write_pretrain_dataset(&captions, &reps, dir.path(), options()).unwrap();
        let shard_path = dir.path().join("reps-00000.unic");
        let bytes = std::fs::read(&shard_path).unwrap();
        std::fs::write(&shard_path, &bytes[..bytes.len() - 7]).unwrap();
        let report = verify_dataset(dir.path()).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn tampered_jsonl_fails_file_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let captions: Vec<DiverseCaption> = (0..5).map(caption).collect();
        let reps: Vec<EmbeddingVector> =
            captions.iter().map(|c| rep(&c.id, 8, 0.5)).collect();
        write_pretrain_dataset(&captions, &reps, dir.path(), options()).unwrap();
        let path = dir.path().join("captions-00000.jsonl");
        let mut body = std::fs::read_to_string(&path).unwrap();
        body = body.replace("scene number 2", "scene number 999");
        std::fs::write(&path, body).unwrap();
        let report = verify_dataset(dir.path()).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn mean_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut writer = DatasetWriter::new(dir.path(), options()).unwrap();
        let mean = MeanVector {
            vector: (0..8).map(|i| i as f64 * 0.5 - 2.0).collect(),
            sample_count: 123,
            modality: Modality::Text,
        };
        writer.write_mean("text-mean", &mean).unwrap();
        let manifest = writer.finish(CostSummary::default()).unwrap();
        assert_eq!(manifest.means, vec!["means/text-mean.unic".to_string()]);
        let (header, rows) = shard::read_shard(&dir.path().join("means/text-mean.unic")).unwrap();
        assert_eq!(header.count, 1);
        assert_eq!(header.modality, Modality::Text);
        assert_eq!(rows[0].len(), 8);
        assert!(verify_dataset(dir.path()).unwrap().passed);
    }

    #[test]
    fn missing_file_detected() {
        let dir = tempfile::tempdir().unwrap();
        let captions: Vec<DiverseCaption> = (0..5).map(caption).collect();
        let reps: Vec<EmbeddingVector> =
            captions.iter().map(|c| rep(&c.id, 8, 0.5)).collect();
        write_pretrain_dataset(&captions, &reps, dir.path(), options()).unwrap();
        std::fs::remove_file(dir.path().join("ids-00000.txt")).unwrap();
        let report = verify_dataset(dir.path()).unwrap();
        assert!(!report.passed);
        assert!(report
            .checks
            .iter()
            .any(|c| c.path == "ids-00000.txt" && c.detail == "missing"));
    }

    #[test]
    fn manifest_is_canonical_and_hash_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let captions: Vec<DiverseCaption> = (0..4).map(caption).collect();
        let reps: Vec<EmbeddingVector> =
            captions.iter().map(|c| rep(&c.id, 8, 0.5)).collect();
        let manifest =
            write_pretrain_dataset(&captions, &reps, dir.path(), options()).unwrap();
        let body = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert_eq!(body, json::canonical_string(&manifest).unwrap());
        assert_eq!(manifest.config_hash, "deadbeef");
    }
}
