//! Pipeline configuration: one TOML file, flag and environment overlays,
//! and a content hash over the effective (post-overlay, pre-path-
//! resolution) configuration that pins every reproducible run.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mirage_core::caption::CaptionBounds;
use mirage_core::gap::GapModelParams;
use mirage_core::instruct::TaskMix;
use mirage_core::metrics::{EntropyUnit, TtrMode};
use mirage_core::seed::{CompiledPolicy, FilterPolicy};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub work_dir: String,
    pub rng_seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            work_dir: "work".into(),
            rng_seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsSection {
    pub captions: Vec<String>,
    pub labels: Option<String>,
    pub templates: Option<String>,
    pub per_label_count: usize,
    pub dedupe: bool,
    /// true: filter, then dedupe (default); false: dedupe raw records
    /// first, then filter the survivors.
    pub filter_first: bool,
    pub policy: FilterPolicy,
}

impl Default for SeedsSection {
    fn default() -> Self {
        Self {
            captions: Vec::new(),
            labels: None,
            templates: None,
            per_label_count: 10,
            dedupe: true,
            filter_first: true,
            policy: FilterPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub bounds_retries: u32,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let bounds = CaptionBounds::default();
        Self {
            min_tokens: bounds.min_tokens,
            max_tokens: bounds.max_tokens,
            bounds_retries: 2,
        }
    }
}

impl Stage1Section {
    pub fn bounds(&self) -> CaptionBounds {
        CaptionBounds {
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub turns: usize,
    /// 0 means every caption.
    pub sample_count: usize,
    pub parse_retries: u32,
    pub mix: TaskMix,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            turns: 3,
            sample_count: 0,
            parse_retries: 2,
            mix: TaskMix::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewaySection {
    pub backend: BackendKind,
    pub base_url: String,
    pub model_id: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub parallelism: usize,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
    pub price_prompt: f64,
    pub price_completion: f64,
    pub timeout_secs: u64,
    pub mock_seed: u64,
    pub mock_expansion_words_min: usize,
    pub mock_expansion_words_max: usize,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            base_url: String::new(),
            model_id: "mock-llm".into(),
            api_key_env: "LLM_API_KEY".into(),
            temperature: 0.7,
            max_tokens: 1024,
            parallelism: 8,
            max_attempts: 5,
            backoff_base_ms: 1000,
            backoff_factor: 2.0,
            price_prompt: 0.0,
            price_completion: 0.0,
            timeout_secs: 60,
            mock_seed: 0,
            mock_expansion_words_min: 60,
            mock_expansion_words_max: 120,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub backend: BackendKind,
    pub base_url: String,
    pub model_id: String,
    pub api_key_env: String,
    pub dim: usize,
    pub normalize: bool,
    pub mock_seed: u64,
    pub timeout_secs: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            base_url: String::new(),
            model_id: String::new(),
            api_key_env: "EMBED_API_KEY".into(),
            dim: 64,
            normalize: true,
            mock_seed: 17,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PackSection {
    pub out_dir: String,
    pub shard_size: usize,
    pub dataset_name: String,
}

impl Default for PackSection {
    fn default() -> Self {
        Self {
            out_dir: "dataset".into(),
            shard_size: 100_000,
            dataset_name: "text-only-synth".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub ttr_mode: TtrMode,
    pub entropy_unit: EntropyUnit,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            ttr_mode: TtrMode::PerSampleMean,
            entropy_unit: EntropyUnit::Nats,
        }
    }
}

fn default_simulate() -> GapModelParams {
    GapModelParams {
        d: 64,
        n: 2000,
        gap_norm: 0.5,
        sigma: 0.05,
        rng_seed: 7,
        latent_subspace_dim: 8,
        normalize: false,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub seeds: SeedsSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub gateway: GatewaySection,
    pub encoder: EncoderSection,
    pub pack: PackSection,
    pub metrics: MetricsSection,
    #[serde(default = "default_simulate")]
    pub simulate: GapModelParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            seeds: SeedsSection::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            gateway: GatewaySection::default(),
            encoder: EncoderSection::default(),
            pack: PackSection::default(),
            metrics: MetricsSection::default(),
            simulate: default_simulate(),
        }
    }
}

/// Config plus everything derived from it at load time.
#[derive(Debug)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    /// SHA-256 over the canonical JSON of the effective config.
    pub config_hash: String,
    /// Directory the config file lives in; relative paths resolve here.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn work_dir(&self) -> PathBuf {
        resolve(&self.base_dir, &self.config.run.work_dir)
    }

    pub fn out_dir(&self) -> PathBuf {
        resolve(&self.base_dir, &self.config.pack.out_dir)
    }

    pub fn caption_inputs(&self) -> Vec<PathBuf> {
        self.config
            .seeds
            .captions
            .iter()
            .map(|p| resolve(&self.base_dir, p))
            .collect()
    }

    pub fn labels_path(&self) -> Option<PathBuf> {
        self.config
            .seeds
            .labels
            .as_ref()
            .map(|p| resolve(&self.base_dir, p))
    }

    pub fn templates_path(&self) -> Option<PathBuf> {
        self.config
            .seeds
            .templates
            .as_ref()
            .map(|p| resolve(&self.base_dir, p))
    }
}

pub fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load, overlay (flags then environment), validate, and hash.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<LoadedConfig> {
    let body = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut config: PipelineConfig = toml::from_str(&body)
        .with_context(|| format!("config {} does not parse", path.display()))?;

    if let Some(seed) = seed_override {
        config.run.rng_seed = seed;
        config.simulate.rng_seed = seed;
    }
    if std::env::var("NO_NETWORK").map(|v| v == "1").unwrap_or(false) {
        config.gateway.backend = BackendKind::Mock;
        config.encoder.backend = BackendKind::Mock;
    }
    validate(&config)?;

    let config_hash = mirage_core::json::canonical_sha256(&config)
        .context("config does not serialize for hashing")?;
    let base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(LoadedConfig {
        config,
        config_hash,
        base_dir,
    })
}

fn validate(config: &PipelineConfig) -> Result<()> {
    CompiledPolicy::compile(config.seeds.policy.clone())
        .map_err(|e| anyhow::anyhow!("seeds.policy: {e}"))?;
    if config.seeds.per_label_count == 0 {
        bail!("seeds.per_label_count: must be at least 1");
    }
    config
        .stage1
        .bounds()
        .validate()
        .map_err(|e| anyhow::anyhow!("stage1: {e}"))?;
    if config.stage2.turns == 0 {
        bail!("stage2.turns: must be at least 1");
    }
    config
        .stage2
        .mix
        .validate()
        .map_err(|e| anyhow::anyhow!("stage2.mix: {e}"))?;
    if config.gateway.parallelism == 0 {
        bail!("gateway.parallelism: must be at least 1");
    }
    if config.gateway.max_attempts == 0 {
        bail!("gateway.max_attempts: must be at least 1");
    }
    if config.gateway.backend == BackendKind::Http && config.gateway.base_url.is_empty() {
        bail!("gateway.base_url: required when gateway.backend = \"http\"");
    }
    if config.gateway.mock_expansion_words_min > config.gateway.mock_expansion_words_max {
        bail!("gateway.mock_expansion_words_min exceeds mock_expansion_words_max");
    }
    if config.encoder.backend == BackendKind::Http && config.encoder.base_url.is_empty() {
        bail!("encoder.base_url: required when encoder.backend = \"http\"");
    }
    if config.encoder.dim == 0 {
        bail!("encoder.dim: must be at least 1");
    }
    if config.pack.shard_size == 0 {
        bail!("pack.shard_size: must be at least 1");
    }
    config
        .simulate
        .validate()
        .map_err(|e| anyhow::anyhow!("simulate: {e}"))?;
    Ok(())
}

/// Templates file shape: JSON map domain -> list of template strings.
pub type TemplatesFile = HashMap<String, Vec<String>>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(&path, "").unwrap();
        let loaded = load_config(&path, None).unwrap();
        assert_eq!(loaded.config.run.rng_seed, 42);
        assert_eq!(loaded.config_hash.len(), 64);
    }

    #[test]
    fn hash_changes_iff_config_changes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.toml");
        let b = dir.path().join("b.toml");
        let c = dir.path().join("c.toml");
        std::fs::write(&a, "[run]\nrng_seed = 1\n").unwrap();
        std::fs::write(&b, "[run]\nrng_seed = 1\n").unwrap();
        std::fs::write(&c, "[run]\nrng_seed = 2\n").unwrap();
        let ha = load_config(&a, None).unwrap().config_hash;
        let hb = load_config(&b, None).unwrap().config_hash;
        let hc = load_config(&c, None).unwrap().config_hash;
        assert_eq!(ha, hb);
        assert_ne!(ha, hc);
        // one toggled key elsewhere also changes the hash
        let d = dir.path().join("d.toml");
        std::fs::write(&d, "[run]\nrng_seed = 1\n\n[encoder]\nnormalize = false\n").unwrap();
        let hd = load_config(&d, None).unwrap().config_hash;
        assert_ne!(ha, hd);
    }

    #[test]
    fn seed_override_feeds_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(&path, "").unwrap();
        let base = load_config(&path, None).unwrap();
        let overridden = load_config(&path, Some(7)).unwrap();
        assert_ne!(base.config_hash, overridden.config_hash);
        assert_eq!(overridden.config.run.rng_seed, 7);
        assert_eq!(overridden.config.simulate.rng_seed, 7);
    }

    #[test]
    fn bad_values_are_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(&path, "[stage1]\nmin_tokens = 50\nmax_tokens = 10\n").unwrap();
        let err = load_config(&path, None).unwrap_err();
        assert!(err.to_string().contains("stage1"), "{err}");

        std::fs::write(&path, "[gateway]\nbackend = \"http\"\n").unwrap();
        let err = load_config(&path, None).unwrap_err();
        assert!(err.to_string().contains("gateway.base_url"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(&path, "[run]\nrng_sed = 3\n").unwrap();
        assert!(load_config(&path, None).is_err());
    }
}
