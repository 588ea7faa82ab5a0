//! Subcommand implementations over the core library.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mirage_core::caption::{self, Stage1Paths};
use mirage_core::embedding::{EmbeddingVector, Modality};
use mirage_core::encoder::{embed_texts, EncoderBackend, HttpEncoderBackend, MockEncoder};
use mirage_core::gap::run_gap_experiment;
use mirage_core::gateway::mock::{MockChatBackend, MockChatConfig};
use mirage_core::gateway::{
    dollars_for, CostReport, Gateway, GatewayConfig, HttpChatBackend, JournalRecord, Prices,
    RetryConfig,
};
use mirage_core::instruct::{self, Stage2Paths};
use mirage_core::json::{canonical_string, read_jsonl, write_atomic, write_jsonl};
use mirage_core::metrics::{compare_reports, compute_corpus_stats, histogram_csv, render_stats_table, CorpusStats};
use mirage_core::pack::{verify_dataset, CostSummary, DatasetWriter, PackOptions};
use mirage_core::rng::SplitMix64;
use mirage_core::seed::{
    dedupe_by_image, expand_domain_labels, ingest_captions, CompiledPolicy, DomainLabel,
    IngestItem, RawCaptionRecord, RejectionStats, TemplateSet,
};
use mirage_core::shard::{self, ShardHeader, SHARD_VERSION};
use mirage_core::transfer::{MeanAccumulator, MeanVector};

use crate::config::{BackendKind, LoadedConfig, TemplatesFile};
use crate::log::Logger;

/// Failure categories mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    /// exit 2: configuration or usage problem
    Config(anyhow::Error),
    /// exit 3: required upstream artifact missing
    Upstream(String),
    /// exit 4: runtime failure
    Runtime(anyhow::Error),
    /// exit 5: validation failed
    Validation(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Upstream(_) => 3,
            Failure::Runtime(_) => 4,
            Failure::Validation(_) => 5,
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Config(e) => format!("configuration error: {e:#}"),
            Failure::Upstream(what) => format!("missing upstream artifact: {what}"),
            Failure::Runtime(e) => format!("runtime failure: {e:#}"),
            Failure::Validation(what) => format!("validation failed: {what}"),
        }
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn require(path: &Path, produced_by: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Upstream(format!(
            "{} (run `{produced_by}` first)",
            path.display()
        )))
    }
}

/// Per-stage completion marker for idempotent re-runs.
#[derive(Serialize, Deserialize)]
struct DoneState {
    config_hash: String,
    outputs: Vec<String>,
}

fn done_path(work_dir: &Path, stage: &str) -> PathBuf {
    work_dir.join(format!("{stage}.done.json"))
}

fn is_done(work_dir: &Path, stage: &str, config_hash: &str) -> bool {
    let path = done_path(work_dir, stage);
    let Ok(body) = std::fs::read_to_string(&path) else {
        return false;
    };
    let Ok(state) = serde_json::from_str::<DoneState>(&body) else {
        return false;
    };
    state.config_hash == config_hash
        && state
            .outputs
            .iter()
            .all(|o| work_dir.join(o).exists())
}

fn mark_done(work_dir: &Path, stage: &str, config_hash: &str, outputs: &[&str]) -> Result<(), Failure> {
    let state = DoneState {
        config_hash: config_hash.to_string(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_atomic(
        &done_path(work_dir, stage),
        canonical_string(&state).map_err(runtime)?.as_bytes(),
    )
    .map_err(runtime)
}

pub fn build_gateway(loaded: &LoadedConfig, work_dir: &Path) -> Result<Gateway, Failure> {
    let cfg = &loaded.config.gateway;
    let gateway_config = GatewayConfig {
        model_id: cfg.model_id.clone(),
        parallelism: cfg.parallelism,
        retry: RetryConfig {
            max_attempts: cfg.max_attempts,
            backoff_base_ms: cfg.backoff_base_ms,
            backoff_factor: cfg.backoff_factor,
            jitter_seed: loaded.config.run.rng_seed,
        },
        prices: Prices {
            prompt: cfg.price_prompt,
            completion: cfg.price_completion,
        },
        journal_path: Some(work_dir.join("ledger.jsonl")),
    };
    let backend: Box<dyn mirage_core::gateway::ChatBackend> = match cfg.backend {
        BackendKind::Mock => Box::new(MockChatBackend::new(MockChatConfig {
            seed: cfg.mock_seed,
            expansion_words: (cfg.mock_expansion_words_min, cfg.mock_expansion_words_max),
            ..MockChatConfig::default()
        })),
        BackendKind::Http => {
            let api_key = std::env::var(&cfg.api_key_env).ok();
            Box::new(
                HttpChatBackend::new(
                    &cfg.base_url,
                    &cfg.model_id,
                    api_key,
                    Duration::from_secs(cfg.timeout_secs),
                )
                .map_err(runtime)?,
            )
        }
    };
    Gateway::new(backend, gateway_config).map_err(runtime)
}

fn build_encoder(loaded: &LoadedConfig) -> Result<Box<dyn EncoderBackend>, Failure> {
    let cfg = &loaded.config.encoder;
    Ok(match cfg.backend {
        BackendKind::Mock => Box::new(MockEncoder::new(cfg.dim, cfg.mock_seed, cfg.normalize)),
        BackendKind::Http => {
            let api_key = std::env::var(&cfg.api_key_env).ok();
            Box::new(
                HttpEncoderBackend::new(
                    &cfg.base_url,
                    &cfg.model_id,
                    api_key,
                    cfg.dim,
                    cfg.normalize,
                    Duration::from_secs(cfg.timeout_secs),
                )
                .map_err(runtime)?,
            )
        }
    })
}

fn ensure_work_dir(loaded: &LoadedConfig) -> Result<PathBuf, Failure> {
    let work_dir = loaded.work_dir();
    std::fs::create_dir_all(&work_dir).map_err(runtime)?;
    Ok(work_dir)
}

// ---------------------------------------------------------------- seed

#[derive(Serialize)]
struct SeedStats {
    ingest: RejectionStats,
    dedup_input: u64,
    dedup_output: u64,
    domain_labels: u64,
    domain_seeds: u64,
    total_seeds: u64,
}

pub fn seed(loaded: &LoadedConfig, force: bool, dry_run: bool) -> Result<(), Failure> {
    let inputs = loaded.caption_inputs();
    if inputs.is_empty() && loaded.labels_path().is_none() {
        return Err(Failure::Config(anyhow!(
            "seeds.captions is empty and no seeds.labels file is configured"
        )));
    }
    for input in &inputs {
        require(input, "configure an existing seeds.captions file")?;
    }
    if let Some(labels) = loaded.labels_path() {
        require(&labels, "configure an existing seeds.labels file")?;
        match loaded.templates_path() {
            Some(templates) => require(&templates, "configure seeds.templates")?,
            None => {
                return Err(Failure::Config(anyhow!(
                    "seeds.labels is set but seeds.templates is not"
                )))
            }
        }
    }
    if dry_run {
        println!("seed: inputs present, configuration valid (dry run)");
        return Ok(());
    }
    let work_dir = ensure_work_dir(loaded)?;
    let mut logger = Logger::open(&work_dir).map_err(runtime)?;
    if !force && is_done(&work_dir, "seed", &loaded.config_hash) {
        logger.event("seed.noop", json!({"reason": "outputs current"}));
        println!("seed: outputs current, nothing to do");
        return Ok(());
    }

    let policy =
        CompiledPolicy::compile(loaded.config.seeds.policy.clone()).map_err(runtime)?;
    let mut stats = RejectionStats::default();
    let mut items: Vec<IngestItem> = Vec::new();
    for input in &inputs {
        let body = std::fs::read_to_string(input).map_err(runtime)?;
        for line in body.lines() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RawCaptionRecord>(line) {
                Ok(record) => items.push(IngestItem::Record(record)),
                Err(_) => items.push(IngestItem::Malformed),
            }
        }
    }
    let (mut seeds, dedup_input, dedup_output) = if loaded.config.seeds.filter_first {
        let seeds = ingest_captions(items, &policy, &mut stats);
        let before = seeds.len() as u64;
        let seeds = if loaded.config.seeds.dedupe {
            dedupe_by_image(seeds)
        } else {
            seeds
        };
        let after = seeds.len() as u64;
        (seeds, before, after)
    } else {
        // dedupe raw records first, then filter the survivors
        let permissive = CompiledPolicy::compile(mirage_core::seed::FilterPolicy {
            min_tokens: 1,
            max_tokens: usize::MAX,
            max_nonalpha_ratio: 1.0,
            reject_patterns: Vec::new(),
        })
        .map_err(runtime)?;
        let mut raw_stats = RejectionStats::default();
        let seeds = ingest_captions(items, &permissive, &mut raw_stats);
        stats.input_records = raw_stats.input_records;
        stats.rejected = raw_stats.rejected; // malformed / invalid records
        let before = seeds.len() as u64;
        let seeds = if loaded.config.seeds.dedupe {
            dedupe_by_image(seeds)
        } else {
            seeds
        };
        let after = seeds.len() as u64;
        let mut kept = Vec::with_capacity(seeds.len());
        for seed in seeds {
            match policy.rejection_reason(&seed.text) {
                None => kept.push(seed),
                Some(reason) => stats.bump(&reason),
            }
        }
        stats.accepted = kept.len() as u64;
        (kept, before, after)
    };

    let mut domain_labels = 0u64;
    let mut domain_seeds = 0u64;
    if let Some(labels_path) = loaded.labels_path() {
        let labels: Vec<DomainLabel> = read_jsonl(&labels_path).map_err(runtime)?;
        let templates_path = loaded.templates_path().expect("validated above");
        let raw: TemplatesFile = serde_json::from_str(
            &std::fs::read_to_string(&templates_path).map_err(runtime)?,
        )
        .map_err(runtime)?;
        let mut sets = HashMap::new();
        for (domain, templates) in raw {
            let set = TemplateSet::new(
                domain.clone(),
                templates,
                loaded.config.seeds.per_label_count,
            )
            .map_err(runtime)?;
            sets.insert(domain, set);
        }
        let expanded =
            expand_domain_labels(&labels, &sets, loaded.config.run.rng_seed).map_err(runtime)?;
        domain_labels = labels.len() as u64;
        domain_seeds = expanded.len() as u64;
        seeds.extend(expanded);
    }

    let seeds_path = work_dir.join("seeds.jsonl");
    write_jsonl(&seeds_path, &seeds).map_err(runtime)?;
    let stats = SeedStats {
        ingest: stats,
        dedup_input,
        dedup_output,
        domain_labels,
        domain_seeds,
        total_seeds: seeds.len() as u64,
    };
    write_atomic(
        &work_dir.join("seed_stats.json"),
        canonical_string(&stats).map_err(runtime)?.as_bytes(),
    )
    .map_err(runtime)?;
    mark_done(&work_dir, "seed", &loaded.config_hash, &["seeds.jsonl", "seed_stats.json"])?;
    logger.event(
        "seed.complete",
        json!({
            "total_seeds": stats.total_seeds,
            "rejected": stats.ingest.rejected_total(),
            "dedup_removed": stats.dedup_input - stats.dedup_output,
        }),
    );
    println!(
        "seed: {} seeds ({} rejected, {} removed as duplicates, {} from domain labels)",
        stats.total_seeds,
        stats.ingest.rejected_total(),
        stats.dedup_input - stats.dedup_output,
        stats.domain_seeds
    );
    Ok(())
}

// -------------------------------------------------------------- expand

pub fn expand(loaded: &LoadedConfig, force: bool, dry_run: bool) -> Result<(), Failure> {
    let work_dir = ensure_work_dir(loaded)?;
    let seeds_path = work_dir.join("seeds.jsonl");
    require(&seeds_path, "seed")?;
    if dry_run {
        println!("expand: upstream present, configuration valid (dry run)");
        return Ok(());
    }
    let mut logger = Logger::open(&work_dir).map_err(runtime)?;
    let paths = Stage1Paths::under(&work_dir);
    if force {
        for p in [&paths.output, &paths.quarantine, &paths.checkpoint, &paths.manifest] {
            let _ = std::fs::remove_file(p);
        }
    }
    let seeds: Vec<mirage_core::seed::CaptionSeed> = read_jsonl(&seeds_path).map_err(runtime)?;
    let gateway = build_gateway(loaded, &work_dir)?;
    let summary = caption::run_stage1(
        &gateway,
        &seeds,
        &loaded.config.stage1.bounds(),
        loaded.config.stage1.bounds_retries,
        &paths,
    )
    .map_err(runtime)?;
    logger.event(
        "expand.complete",
        json!({
            "accepted": summary.accepted,
            "rejected": summary.rejected,
            "skipped_from_checkpoint": summary.skipped_from_checkpoint,
            "gateway_calls": gateway.ledger().calls,
        }),
    );
    if summary.rejected > 0 {
        logger.event(
            "expand.quarantine",
            json!({"count": summary.rejected, "file": paths.quarantine.display().to_string()}),
        );
    }
    println!(
        "expand: {} captions accepted, {} quarantined ({} skipped via checkpoint)",
        summary.accepted, summary.rejected, summary.skipped_from_checkpoint
    );
    Ok(())
}

// ------------------------------------------------------------ instruct

pub fn instruct(loaded: &LoadedConfig, force: bool, dry_run: bool) -> Result<(), Failure> {
    let work_dir = ensure_work_dir(loaded)?;
    let captions_path = work_dir.join("captions.jsonl");
    require(&captions_path, "expand")?;
    if dry_run {
        println!("instruct: upstream present, configuration valid (dry run)");
        return Ok(());
    }
    let mut logger = Logger::open(&work_dir).map_err(runtime)?;
    let paths = Stage2Paths::under(&work_dir);
    if force {
        for p in [&paths.output, &paths.quarantine, &paths.checkpoint, &paths.manifest] {
            let _ = std::fs::remove_file(p);
        }
    }
    let captions = caption::load_captions(&captions_path).map_err(runtime)?;
    let selected = select_captions(&captions, loaded.config.stage2.sample_count, loaded.config.run.rng_seed);
    let gateway = build_gateway(loaded, &work_dir)?;
    let summary = instruct::run_stage2(
        &gateway,
        &selected,
        &loaded.config.stage2.mix,
        loaded.config.stage2.turns,
        loaded.config.stage2.parse_retries,
        loaded.config.run.rng_seed,
        &paths,
    )
    .map_err(runtime)?;
    logger.event(
        "instruct.complete",
        json!({
            "accepted": summary.accepted,
            "rejected": summary.rejected,
            "selected": selected.len(),
        }),
    );
    println!(
        "instruct: {} dialogues accepted, {} quarantined (of {} sampled captions)",
        summary.accepted,
        summary.rejected,
        selected.len()
    );
    Ok(())
}

/// Sample `count` captions without replacement (0 = all), preserving
/// corpus order.
fn select_captions(
    captions: &[mirage_core::caption::DiverseCaption],
    count: usize,
    rng_seed: u64,
) -> Vec<mirage_core::caption::DiverseCaption> {
    const SAMPLE_STREAM: u64 = 0x73616d70;
    if count == 0 || count >= captions.len() {
        return captions.to_vec();
    }
    let mut rng = SplitMix64::stream(rng_seed, SAMPLE_STREAM);
    let mut picks = rng.sample_indices(captions.len(), count);
    picks.sort_unstable();
    picks.into_iter().map(|i| captions[i].clone()).collect()
}

// --------------------------------------------------------------- embed

#[derive(Serialize, Deserialize)]
struct EmbedManifest {
    dim: usize,
    count: u64,
    encoder_id: String,
    normalized: bool,
    shards: Vec<String>,
    config_hash: String,
}

pub fn embed(loaded: &LoadedConfig, force: bool, dry_run: bool) -> Result<(), Failure> {
    let work_dir = ensure_work_dir(loaded)?;
    let captions_path = work_dir.join("captions.jsonl");
    require(&captions_path, "expand")?;
    if dry_run {
        println!("embed: upstream present, configuration valid (dry run)");
        return Ok(());
    }
    let mut logger = Logger::open(&work_dir).map_err(runtime)?;
    if !force && is_done(&work_dir, "embed", &loaded.config_hash) {
        println!("embed: outputs current, nothing to do");
        return Ok(());
    }
    let captions = caption::load_captions(&captions_path).map_err(runtime)?;
    let encoder = build_encoder(loaded)?;
    let embed_dir = work_dir.join("embeddings");
    std::fs::create_dir_all(&embed_dir).map_err(runtime)?;

    let shard_size = loaded.config.pack.shard_size;
    let mut shards = Vec::new();
    let mut total = 0u64;
    for (shard_index, chunk) in captions.chunks(shard_size).enumerate() {
        let items: Vec<(String, String)> = chunk
            .iter()
            .map(|c| (c.id.clone(), c.text.clone()))
            .collect();
        let vectors = embed_texts(encoder.as_ref(), &items).map_err(runtime)?;
        let rel = format!("text-{shard_index:05}.unic");
        let rows: Vec<Vec<f32>> = vectors.iter().map(|v| v.vector.clone()).collect();
        shard::write_shard(
            &embed_dir.join(&rel),
            &ShardHeader {
                version: SHARD_VERSION,
                dim: encoder.dim() as u32,
                count: rows.len() as u64,
                modality: Modality::Text,
                normalized: encoder.normalized(),
            },
            &rows,
        )
        .map_err(runtime)?;
        let ids: String = vectors.iter().map(|v| format!("{}\n", v.id)).collect();
        std::fs::write(embed_dir.join(format!("text-ids-{shard_index:05}.txt")), ids)
            .map_err(runtime)?;
        total += rows.len() as u64;
        shards.push(rel);
    }
    let manifest = EmbedManifest {
        dim: encoder.dim(),
        count: total,
        encoder_id: encoder.id().to_string(),
        normalized: encoder.normalized(),
        shards,
        config_hash: loaded.config_hash.clone(),
    };
    write_atomic(
        &embed_dir.join("embeddings_manifest.json"),
        canonical_string(&manifest).map_err(runtime)?.as_bytes(),
    )
    .map_err(runtime)?;
    mark_done(
        &work_dir,
        "embed",
        &loaded.config_hash,
        &["embeddings/embeddings_manifest.json"],
    )?;
    logger.event("embed.complete", json!({"count": total, "dim": manifest.dim}));
    println!("embed: {total} text vectors in {} shards (dim {})", manifest.shards.len(), manifest.dim);
    Ok(())
}

// ------------------------------------------------------------ transfer

#[derive(Serialize, Deserialize)]
struct TransferManifest {
    dim: usize,
    count: u64,
    mean_file: String,
    mean_sample_count: u64,
    shards: Vec<String>,
    config_hash: String,
}

#[derive(Serialize)]
struct MeanSidecar {
    dim: usize,
    count: u64,
    modality: Modality,
}

fn write_mean_files(dir: &Path, name: &str, mean: &MeanVector) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    let row: Vec<f32> = mean.vector.iter().map(|&x| x as f32).collect();
    shard::write_shard(
        &dir.join(format!("{name}.unic")),
        &ShardHeader {
            version: SHARD_VERSION,
            dim: row.len() as u32,
            count: 1,
            modality: mean.modality,
            normalized: false,
        },
        &[row],
    )
    .map_err(runtime)?;
    let sidecar = MeanSidecar {
        dim: mean.vector.len(),
        count: mean.sample_count,
        modality: mean.modality,
    };
    std::fs::write(
        dir.join(format!("{name}.json")),
        canonical_string(&sidecar).map_err(runtime)?.as_bytes(),
    )
    .map_err(runtime)?;
    Ok(())
}

/// Read a persisted mean (single-row shard + sidecar).
fn read_mean_files(unic_path: &Path) -> Result<MeanVector, Failure> {
    let (header, rows) = shard::read_shard(unic_path).map_err(runtime)?;
    if header.count != 1 {
        return Err(Failure::Validation(format!(
            "{} holds {} rows, a mean file must hold exactly 1",
            unic_path.display(),
            header.count
        )));
    }
    #[derive(Deserialize)]
    struct Sidecar {
        count: u64,
    }
    let sidecar_path = unic_path.with_extension("json");
    let sample_count = std::fs::read_to_string(&sidecar_path)
        .ok()
        .and_then(|body| serde_json::from_str::<Sidecar>(&body).ok())
        .map(|s| s.count)
        .unwrap_or(1);
    Ok(MeanVector {
        vector: rows[0].iter().map(|&x| f64::from(x)).collect(),
        sample_count,
        modality: header.modality,
    })
}

pub enum TransferMode {
    /// Text shards -> synthetic image representations.
    Pretrain,
    /// Real image shards -> centered representations.
    Inference {
        input_dir: PathBuf,
        mean_file: Option<PathBuf>,
    },
}

pub fn transfer(
    loaded: &LoadedConfig,
    force: bool,
    dry_run: bool,
    mode: TransferMode,
) -> Result<(), Failure> {
    let work_dir = ensure_work_dir(loaded)?;
    match mode {
        TransferMode::Pretrain => transfer_pretrain(loaded, &work_dir, force, dry_run),
        TransferMode::Inference { input_dir, mean_file } => {
            transfer_inference(loaded, &work_dir, dry_run, &input_dir, mean_file.as_deref())
        }
    }
}

fn sorted_shards(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, Failure> {
    let mut shards = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(runtime)?;
    for entry in entries {
        let entry = entry.map_err(runtime)?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with(prefix) && name.ends_with(".unic") {
            shards.push(entry.path());
        }
    }
    shards.sort();
    Ok(shards)
}

fn transfer_pretrain(
    loaded: &LoadedConfig,
    work_dir: &Path,
    force: bool,
    dry_run: bool,
) -> Result<(), Failure> {
    let embed_dir = work_dir.join("embeddings");
    require(&embed_dir.join("embeddings_manifest.json"), "embed")?;
    if dry_run {
        println!("transfer: upstream present, configuration valid (dry run)");
        return Ok(());
    }
    let mut logger = Logger::open(work_dir).map_err(runtime)?;
    if !force && is_done(work_dir, "transfer", &loaded.config_hash) {
        println!("transfer: outputs current, nothing to do");
        return Ok(());
    }
    let transfer_dir = work_dir.join("transfer");
    std::fs::create_dir_all(&transfer_dir).map_err(runtime)?;

    let shards = sorted_shards(&embed_dir, "text-")?;
    // pass 1: per-shard partial sums merged in shard order
    let mut accumulator = MeanAccumulator::new(loaded.config.encoder.dim);
    let mut loaded_shards = Vec::new();
    for path in &shards {
        let (header, rows) = shard::read_shard(path).map_err(runtime)?;
        if header.modality != Modality::Text {
            return Err(Failure::Validation(format!(
                "{} holds {} vectors, expected text",
                path.display(),
                header.modality
            )));
        }
        let mut partial = MeanAccumulator::new(header.dim as usize);
        for row in &rows {
            let as_f64: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
            partial.push_row_f64(&as_f64);
        }
        accumulator.merge(&partial).map_err(runtime)?;
        loaded_shards.push((path.clone(), header, rows));
    }
    let mean = accumulator.finish_as(Modality::Text).map_err(runtime)?;
    write_mean_files(&transfer_dir.join("means"), "text-mean", &mean)?;

    // pass 2: subtract
    let mut out_shards = Vec::new();
    let mut total = 0u64;
    for (index, (path, header, rows)) in loaded_shards.iter().enumerate() {
        let centered: Vec<Vec<f32>> = rows
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&mean.vector)
                    .map(|(&x, &m)| (f64::from(x) - m) as f32)
                    .collect()
            })
            .collect();
        let rel = format!("synth-{index:05}.unic");
        shard::write_shard(
            &transfer_dir.join(&rel),
            &ShardHeader {
                version: SHARD_VERSION,
                dim: header.dim,
                count: centered.len() as u64,
                modality: Modality::SyntheticImage,
                normalized: false,
            },
            &centered,
        )
        .map_err(runtime)?;
        // ids travel with the vectors
        let ids_src = path
            .to_string_lossy()
            .replace("text-", "text-ids-")
            .replace(".unic", ".txt");
        let ids = std::fs::read_to_string(&ids_src).map_err(runtime)?;
        std::fs::write(transfer_dir.join(format!("synth-ids-{index:05}.txt")), ids)
            .map_err(runtime)?;
        total += centered.len() as u64;
        out_shards.push(rel);
    }
    let manifest = TransferManifest {
        dim: loaded.config.encoder.dim,
        count: total,
        mean_file: "means/text-mean.unic".into(),
        mean_sample_count: mean.sample_count,
        shards: out_shards,
        config_hash: loaded.config_hash.clone(),
    };
    write_atomic(
        &transfer_dir.join("transfer_manifest.json"),
        canonical_string(&manifest).map_err(runtime)?.as_bytes(),
    )
    .map_err(runtime)?;
    mark_done(
        work_dir,
        "transfer",
        &loaded.config_hash,
        &["transfer/transfer_manifest.json"],
    )?;
    logger.event("transfer.complete", json!({"count": total}));
    println!(
        "transfer: {total} synthetic image representations (mean over {} text vectors)",
        mean.sample_count
    );
    Ok(())
}

fn transfer_inference(
    loaded: &LoadedConfig,
    work_dir: &Path,
    dry_run: bool,
    input_dir: &Path,
    mean_file: Option<&Path>,
) -> Result<(), Failure> {
    if !input_dir.exists() {
        return Err(Failure::Upstream(format!(
            "{} (provide a directory of real-image .unic shards)",
            input_dir.display()
        )));
    }
    if dry_run {
        println!("transfer --mode inference: inputs present (dry run)");
        return Ok(());
    }
    let out_dir = work_dir.join("transfer").join("inference");
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;
    let shards = sorted_shards(input_dir, "")?;
    if shards.is_empty() {
        return Err(Failure::Upstream(format!(
            "{} holds no .unic shards",
            input_dir.display()
        )));
    }
    let mut loaded_shards = Vec::new();
    let mut accumulator = MeanAccumulator::new(loaded.config.encoder.dim);
    for path in &shards {
        let (header, rows) = shard::read_shard(path).map_err(runtime)?;
        if header.modality != Modality::RealImage {
            return Err(Failure::Validation(format!(
                "{} holds {} vectors, expected real_image",
                path.display(),
                header.modality
            )));
        }
        let mut partial = MeanAccumulator::new(header.dim as usize);
        for row in &rows {
            let as_f64: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
            partial.push_row_f64(&as_f64);
        }
        accumulator.merge(&partial).map_err(runtime)?;
        loaded_shards.push((header, rows));
    }
    // the batch mean of the supplied set, or an explicit reference mean
    let mean = match mean_file {
        Some(path) => read_mean_files(path)?,
        None => accumulator
            .finish_as(Modality::RealImage)
            .map_err(runtime)?,
    };
    write_mean_files(&out_dir.join("means"), "image-mean", &mean)?;
    let mut total = 0u64;
    for (index, (header, rows)) in loaded_shards.iter().enumerate() {
        let centered: Vec<Vec<f32>> = rows
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&mean.vector)
                    .map(|(&x, &m)| (f64::from(x) - m) as f32)
                    .collect()
            })
            .collect();
        shard::write_shard(
            &out_dir.join(format!("centered-{index:05}.unic")),
            &ShardHeader {
                version: SHARD_VERSION,
                dim: header.dim,
                count: centered.len() as u64,
                modality: Modality::CenteredRealImage,
                normalized: false,
            },
            &centered,
        )
        .map_err(runtime)?;
        total += centered.len() as u64;
    }
    println!(
        "transfer --mode inference: centered {total} real-image vectors into {}",
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- pack

fn ledger_cost_summary(work_dir: &Path, prices: Prices) -> CostSummary {
    let path = work_dir.join("ledger.jsonl");
    let records: Vec<JournalRecord> = read_jsonl(&path).unwrap_or_default();
    let prompt_tokens: u64 = records.iter().map(|r| r.prompt_tokens).sum();
    let completion_tokens: u64 = records.iter().map(|r| r.completion_tokens).sum();
    CostSummary {
        calls: records.len() as u64,
        prompt_tokens,
        completion_tokens,
        dollars: dollars_for(prompt_tokens, completion_tokens, prices),
    }
}

pub fn pack(loaded: &LoadedConfig, force: bool, dry_run: bool) -> Result<(), Failure> {
    let work_dir = ensure_work_dir(loaded)?;
    let captions_path = work_dir.join("captions.jsonl");
    let instruct_path = work_dir.join("instruct.jsonl");
    let transfer_dir = work_dir.join("transfer");
    require(&captions_path, "expand")?;
    require(&instruct_path, "instruct")?;
    require(&transfer_dir.join("transfer_manifest.json"), "transfer")?;
    if dry_run {
        println!("pack: upstream present, configuration valid (dry run)");
        return Ok(());
    }
    let out_dir = loaded.out_dir();
    let mut logger = Logger::open(&work_dir).map_err(runtime)?;
    if !force && out_dir.join("manifest.json").exists() {
        let body = std::fs::read_to_string(out_dir.join("manifest.json")).map_err(runtime)?;
        if let Ok(manifest) = serde_json::from_str::<mirage_core::pack::Manifest>(&body) {
            if manifest.config_hash == loaded.config_hash {
                println!("pack: dataset current, nothing to do");
                return Ok(());
            }
        }
    }

    let captions = caption::load_captions(&captions_path).map_err(runtime)?;
    let samples = instruct::load_samples(&instruct_path).map_err(runtime)?;

    // synthetic reps, concatenated in shard order
    let mut reps: Vec<EmbeddingVector> = Vec::new();
    for (index, rel) in sorted_shards(&transfer_dir, "synth-")?.iter().enumerate() {
        let (header, rows) = shard::read_shard(rel).map_err(runtime)?;
        let ids_path = transfer_dir.join(format!("synth-ids-{index:05}.txt"));
        let ids = std::fs::read_to_string(&ids_path).map_err(runtime)?;
        let ids: Vec<&str> = ids.lines().collect();
        if ids.len() != rows.len() {
            return Err(Failure::Validation(format!(
                "{}: {} ids for {} rows",
                ids_path.display(),
                ids.len(),
                rows.len()
            )));
        }
        for (id, row) in ids.iter().zip(rows) {
            reps.push(EmbeddingVector {
                id: id.to_string(),
                vector: row,
                modality: header.modality,
                normalized: header.normalized,
            });
        }
    }
    if reps.len() != captions.len() {
        return Err(Failure::Validation(format!(
            "{} captions but {} synthetic representations; re-run embed/transfer",
            captions.len(),
            reps.len()
        )));
    }

    let by_id: HashMap<&str, &EmbeddingVector> =
        reps.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut instruct_reps = Vec::with_capacity(samples.len());
    for sample in &samples {
        match by_id.get(sample.caption_id.as_str()) {
            Some(rep) => instruct_reps.push((*rep).clone()),
            None => {
                return Err(Failure::Validation(format!(
                    "dialogue {} references caption {} with no representation",
                    sample.id, sample.caption_id
                )))
            }
        }
    }

    let mean = read_mean_files(&transfer_dir.join("means/text-mean.unic"))?;
    let cost = ledger_cost_summary(
        &work_dir,
        Prices {
            prompt: loaded.config.gateway.price_prompt,
            completion: loaded.config.gateway.price_completion,
        },
    );
    let options = PackOptions {
        dataset_name: loaded.config.pack.dataset_name.clone(),
        shard_size: loaded.config.pack.shard_size,
        dim: loaded.config.encoder.dim as u32,
        encoder_id: build_encoder(loaded)?.id().to_string(),
        normalized: loaded.config.encoder.normalize,
        config_hash: loaded.config_hash.clone(),
        created_at: None,
    };
    let mut writer = DatasetWriter::new(&out_dir, options).map_err(runtime)?;
    let result = writer
        .write_pretrain(&captions, &reps)
        .and_then(|_| writer.write_instruct(&samples, &instruct_reps))
        .and_then(|_| writer.write_mean("text-mean", &mean));
    if let Err(e) = result {
        writer.abort();
        return Err(runtime(e));
    }
    let manifest = writer.finish(cost).map_err(runtime)?;
    logger.event(
        "pack.complete",
        json!({
            "pretrain_pairs": manifest.counts.pretrain_pairs,
            "instruct_pairs": manifest.counts.instruct_pairs,
            "out_dir": out_dir.display().to_string(),
        }),
    );
    println!(
        "pack: {} pretrain pairs, {} instruction pairs -> {}",
        manifest.counts.pretrain_pairs,
        manifest.counts.instruct_pairs,
        out_dir.display()
    );
    Ok(())
}

// -------------------------------------------------------------- verify

pub fn verify(loaded: &LoadedConfig) -> Result<(), Failure> {
    let out_dir = loaded.out_dir();
    require(&out_dir.join("manifest.json"), "pack")?;
    let report = verify_dataset(&out_dir).map_err(runtime)?;
    for check in &report.checks {
        println!(
            "[{}] {}: {}",
            if check.ok { "ok" } else { "FAIL" },
            check.path,
            check.detail
        );
    }
    if report.passed {
        println!("verify: dataset valid");
        Ok(())
    } else {
        Err(Failure::Validation(format!(
            "{} of {} checks failed",
            report.checks.iter().filter(|c| !c.ok).count(),
            report.checks.len()
        )))
    }
}

// ------------------------------------------------------------- analyze

pub fn analyze(
    loaded: &LoadedConfig,
    input: Option<PathBuf>,
    against: Option<PathBuf>,
) -> Result<(), Failure> {
    let work_dir = ensure_work_dir(loaded)?;
    let input = input.unwrap_or_else(|| work_dir.join("captions.jsonl"));
    require(&input, "expand (or pass --input)")?;

    let texts: Vec<String> = if input.extension().is_some_and(|e| e == "jsonl") {
        #[derive(Deserialize)]
        struct TextRow {
            text: String,
        }
        let rows: Vec<TextRow> = read_jsonl(&input).map_err(runtime)?;
        rows.into_iter().map(|r| r.text).collect()
    } else {
        std::fs::read_to_string(&input)
            .map_err(runtime)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect()
    };
    let stats = compute_corpus_stats(
        &texts,
        loaded.config.metrics.ttr_mode,
        loaded.config.metrics.entropy_unit,
    )
    .map_err(|e| Failure::Validation(e.to_string()))?;

    let analysis_dir = work_dir.join("analysis");
    std::fs::create_dir_all(&analysis_dir).map_err(runtime)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "corpus".into());
    let stats_path = analysis_dir.join(format!("{stem}-stats.json"));
    write_atomic(
        &stats_path,
        canonical_string(&stats).map_err(runtime)?.as_bytes(),
    )
    .map_err(runtime)?;
    std::fs::write(
        analysis_dir.join(format!("{stem}-hist.csv")),
        histogram_csv(&stats),
    )
    .map_err(runtime)?;
    std::fs::write(
        analysis_dir.join(format!("{stem}-stats.txt")),
        render_stats_table(&stats),
    )
    .map_err(runtime)?;
    println!("{}", canonical_string(&stats).map_err(runtime)?);
    print!("{}", render_stats_table(&stats));

    if let Some(against_path) = against {
        require(&against_path, "analyze the comparison corpus first")?;
        let other: CorpusStats = serde_json::from_str(
            &std::fs::read_to_string(&against_path).map_err(runtime)?,
        )
        .map_err(runtime)?;
        let table = compare_reports(&stats, &other)
            .map_err(|e| Failure::Validation(e.to_string()))?;
        print!("{}", table.render());
        write_atomic(
            &analysis_dir.join(format!("{stem}-delta.json")),
            canonical_string(&table).map_err(runtime)?.as_bytes(),
        )
        .map_err(runtime)?;
    }
    println!("analyze: report written to {}", stats_path.display());
    Ok(())
}

// --------------------------------------------------------- simulate-gap

pub fn simulate_gap(loaded: &LoadedConfig, output: Option<PathBuf>) -> Result<(), Failure> {
    let report = run_gap_experiment(&loaded.config.simulate)
        .map_err(|e| Failure::Config(anyhow!("simulate: {e}")))?;
    let body = canonical_string(&report).map_err(runtime)?;
    println!("{body}");
    if let Some(path) = output {
        write_atomic(&path, body.as_bytes()).map_err(runtime)?;
    }
    Ok(())
}

// -------------------------------------------------------------- report

pub fn report(loaded: &LoadedConfig, samples: Option<u64>) -> Result<(), Failure> {
    let work_dir = loaded.work_dir();
    let ledger_path = work_dir.join("ledger.jsonl");
    require(&ledger_path, "expand or instruct (gateway stages write the ledger)")?;
    let records: Vec<JournalRecord> = read_jsonl(&ledger_path).map_err(runtime)?;
    let prompt_tokens: u64 = records.iter().map(|r| r.prompt_tokens).sum();
    let completion_tokens: u64 = records.iter().map(|r| r.completion_tokens).sum();
    let dollars = dollars_for(
        prompt_tokens,
        completion_tokens,
        Prices {
            prompt: loaded.config.gateway.price_prompt,
            completion: loaded.config.gateway.price_completion,
        },
    );
    let sample_count = match samples {
        Some(n) => n,
        None => {
            // fall back to accepted stage-1 captions
            let manifest_path = work_dir.join("stage1_manifest.json");
            let accepted = std::fs::read_to_string(&manifest_path)
                .ok()
                .and_then(|body| serde_json::from_str::<caption::StageSummary>(&body).ok())
                .map(|s| s.accepted)
                .unwrap_or(0);
            accepted
        }
    };
    if sample_count == 0 {
        return Err(Failure::Config(anyhow!(
            "sample count is zero; pass --samples N"
        )));
    }
    let wall_time_ms = match (records.iter().map(|r| r.ts).min(), records.iter().map(|r| r.ts).max()) {
        (Some(min), Some(max)) => (max - min) * 1000,
        _ => 0,
    };
    let cost_report = CostReport {
        per_sample_dollars: dollars / sample_count as f64,
        total_dollars: dollars,
        wall_time_ms,
    };
    println!("{}", canonical_string(&cost_report).map_err(runtime)?);
    Ok(())
}
