//! Chat-completion gateway used by the caption and instruction stages.
//!
//! One interface fronts two backends: an HTTP client speaking the common
//! chat-completions wire shape (`model`, `messages`, `temperature`,
//! `max_tokens`; response `choices[0].message.content` plus `usage`), and
//! a deterministic mock whose output is a pure function of
//! (prompt, mock seed) so the whole pipeline runs offline.
//!
//! The gateway retries transient failures (HTTP 429/5xx and transport
//! errors) with exponential backoff. Jitter for each call comes from a
//! stream seeded by (retry seed, FNV hash of the user prompt), so a call's
//! backoff schedule does not depend on thread interleaving. Sleeping goes
//! through the [`Sleeper`] trait; tests inject a recording sleeper instead
//! of waiting on the wall clock.
//!
//! Every successful call lands in the cost ledger. Dollars are always
//! derived from the integer token totals (`prompt_tokens * price_in +
//! completion_tokens * price_out`), never accumulated per call, and an
//! optional append-only journal keeps totals recoverable after a crash.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json::JsonlAppender;
use crate::rng::{fnv1a64, SplitMix64};
use crate::text;

pub mod mock;

/// Generation parameters carried by every prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 1024,
            stop: None,
        }
    }
}

/// One chat request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatPrompt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub user: String,
    pub params: GenerationParams,
}

impl ChatPrompt {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            system: None,
            user: text.into(),
            params: GenerationParams::default(),
        }
    }
}

/// One completed chat call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub model_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt has an empty user message")]
    EmptyPrompt,
    #[error("transport failure: {detail}")]
    Transport { detail: String },
    #[error("backend returned status {status}: {detail}")]
    Status { status: u16, detail: String },
    #[error("response carried no completion text")]
    MissingText,
    #[error("backend failure: {detail}")]
    Backend { detail: String },
    #[error("retries exhausted after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        #[source]
        last: Box<GatewayError>,
    },
    #[error("invalid gateway configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("cost report requires sample_count >= 1")]
    ZeroSamples,
}

impl GatewayError {
    /// Transient failures worth retrying: 429, 5xx, transport errors.
    pub fn retryable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::Status { status, .. } => *status == 429 || (500..=599).contains(status),
            _ => false,
        }
    }
}

/// Raw backend response before ledger accounting.
#[derive(Debug, Clone)]
pub struct BackendCompletion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, prompt: &ChatPrompt) -> Result<BackendCompletion, GatewayError>;
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

/// Production sleeper.
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Test sleeper that records requested delays instead of waiting.
#[derive(Default)]
pub struct RecordingSleeper {
    pub delays: Mutex<Vec<Duration>>,
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, duration: Duration) {
        self.delays.lock().unwrap().push(duration);
    }
}

/// Retry policy. Delay before attempt k+1 is
/// `base * factor^(k-1) * (1 + u) / 2` with u uniform in [0,1) from the
/// per-call jitter stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
    pub jitter_seed: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            backoff_base_ms: 1000,
            backoff_factor: 2.0,
            jitter_seed: 0,
        }
    }
}

/// Per-token prices in dollars.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Prices {
    pub prompt: f64,
    pub completion: f64,
}

/// Ledger snapshot. Dollars are derived from the token totals at read
/// time so the arithmetic is exact given the totals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostLedger {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub dollars: f64,
    pub wall_time_ms: u64,
}

/// One journal line per successful call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JournalRecord {
    pub ts: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub model_id: String,
}

#[derive(Debug, Default)]
struct LedgerState {
    calls: u64,
    prompt_tokens: u64,
    completion_tokens: u64,
    wall_time_ms: u64,
}

/// Final cost report for a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub per_sample_dollars: f64,
    pub total_dollars: f64,
    pub wall_time_ms: u64,
}

/// Per-sample cost from a ledger snapshot.
pub fn report_cost(ledger: &CostLedger, sample_count: u64) -> Result<CostReport, GatewayError> {
    if sample_count == 0 {
        return Err(GatewayError::ZeroSamples);
    }
    Ok(CostReport {
        per_sample_dollars: ledger.dollars / sample_count as f64,
        total_dollars: ledger.dollars,
        wall_time_ms: ledger.wall_time_ms,
    })
}

/// Dollars for given token totals under `prices`.
pub fn dollars_for(prompt_tokens: u64, completion_tokens: u64, prices: Prices) -> f64 {
    prompt_tokens as f64 * prices.prompt + completion_tokens as f64 * prices.completion
}

pub struct GatewayConfig {
    pub model_id: String,
    pub parallelism: usize,
    pub retry: RetryConfig,
    pub prices: Prices,
    pub journal_path: Option<std::path::PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            model_id: "mock-llm".into(),
            parallelism: 8,
            retry: RetryConfig::default(),
            prices: Prices::default(),
            journal_path: None,
        }
    }
}

/// Shared chat gateway: retry, accounting, bounded-parallel batching.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    config: GatewayConfig,
    sleeper: Box<dyn Sleeper>,
    state: Mutex<LedgerState>,
    journal: Option<Mutex<JsonlAppender>>,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>, config: GatewayConfig) -> Result<Self, GatewayError> {
        Self::with_sleeper(backend, config, Box::new(ThreadSleeper))
    }

    pub fn with_sleeper(
        backend: Box<dyn ChatBackend>,
        config: GatewayConfig,
        sleeper: Box<dyn Sleeper>,
    ) -> Result<Self, GatewayError> {
        if config.parallelism == 0 {
            return Err(GatewayError::InvalidConfig {
                reason: "parallelism must be at least 1".into(),
            });
        }
        if config.retry.max_attempts == 0 {
            return Err(GatewayError::InvalidConfig {
                reason: "max_attempts must be at least 1".into(),
            });
        }
        let journal = match &config.journal_path {
            Some(path) => Some(Mutex::new(JsonlAppender::open(path).map_err(|e| {
                GatewayError::InvalidConfig {
                    reason: format!("cannot open journal: {e}"),
                }
            })?)),
            None => None,
        };
        Ok(Self {
            backend,
            config,
            sleeper,
            state: Mutex::new(LedgerState::default()),
            journal,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    /// One completion with retry and ledger accounting.
    pub fn complete(&self, prompt: &ChatPrompt) -> Result<CompletionResult, GatewayError> {
        if prompt.user.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let mut jitter = SplitMix64::stream(self.config.retry.jitter_seed, fnv1a64(&prompt.user));
        let start = Instant::now();
        let mut attempt = 1u32;
        loop {
            match self.backend.complete(prompt) {
                Ok(completion) => {
                    let latency_ms = start.elapsed().as_millis() as u64;
                    self.record(&completion, latency_ms);
                    return Ok(CompletionResult {
                        text: completion.text,
                        prompt_tokens: completion.prompt_tokens,
                        completion_tokens: completion.completion_tokens,
                        model_id: self.config.model_id.clone(),
                        latency_ms,
                    });
                }
                Err(err) if err.retryable() && attempt < self.config.retry.max_attempts => {
                    let nominal = self.config.retry.backoff_base_ms as f64
                        * self.config.retry.backoff_factor.powi(attempt as i32 - 1);
                    let delay_ms = nominal * (1.0 + jitter.next_f64()) / 2.0;
                    self.sleeper.sleep(Duration::from_millis(delay_ms as u64));
                    attempt += 1;
                }
                Err(err) if err.retryable() => {
                    return Err(GatewayError::Exhausted {
                        attempts: attempt,
                        last: Box::new(err),
                    });
                }
                Err(err) => return Err(err),
            }
        }
    }

    /// Order-aligned batch with at most `parallelism` calls in flight.
    /// Each item fails independently.
    pub fn complete_batch(
        &self,
        prompts: &[ChatPrompt],
    ) -> Vec<Result<CompletionResult, GatewayError>> {
        let n = prompts.len();
        if n == 0 {
            return Vec::new();
        }
        let workers = self.config.parallelism.min(n);
        if workers == 1 {
            return prompts.iter().map(|p| self.complete(p)).collect();
        }
        let slots: Vec<Mutex<Option<Result<CompletionResult, GatewayError>>>> =
            (0..n).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let index = next.fetch_add(1, Ordering::Relaxed);
                    if index >= n {
                        break;
                    }
                    let result = self.complete(&prompts[index]);
                    *slots[index].lock().unwrap() = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().unwrap().expect("worker filled slot"))
            .collect()
    }

    /// Current ledger snapshot with dollars derived from token totals.
    pub fn ledger(&self) -> CostLedger {
        let state = self.state.lock().unwrap();
        CostLedger {
            calls: state.calls,
            prompt_tokens: state.prompt_tokens,
            completion_tokens: state.completion_tokens,
            dollars: dollars_for(state.prompt_tokens, state.completion_tokens, self.config.prices),
            wall_time_ms: state.wall_time_ms,
        }
    }

    fn record(&self, completion: &BackendCompletion, latency_ms: u64) {
        {
            let mut state = self.state.lock().unwrap();
            state.calls += 1;
            state.prompt_tokens += completion.prompt_tokens;
            state.completion_tokens += completion.completion_tokens;
            state.wall_time_ms += latency_ms;
        }
        if let Some(journal) = &self.journal {
            let record = JournalRecord {
                ts: SystemTime::now()
                    .duration_since(SystemTime::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                prompt_tokens: completion.prompt_tokens,
                completion_tokens: completion.completion_tokens,
                model_id: self.config.model_id.clone(),
            };
            // Journal write failures must not fail the call; totals stay
            // correct in memory.
            let _ = journal.lock().unwrap().append(&record);
        }
    }
}

/// Word count used for mock usage accounting.
pub fn approx_tokens(prompt: &ChatPrompt) -> u64 {
    let system = prompt.system.as_deref().unwrap_or("");
    (text::word_count(system) + text::word_count(&prompt.user)) as u64
}

/// HTTP chat-completions backend.
pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::InvalidConfig {
                reason: format!("http client: {e}"),
            })?;
        let mut base_url = base_url.into();
        while base_url.ends_with('/') {
            base_url.pop();
        }
        Ok(Self {
            client,
            base_url,
            model: model.into(),
            api_key,
        })
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a Vec<String>>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, prompt: &ChatPrompt) -> Result<BackendCompletion, GatewayError> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &prompt.system {
            messages.push(WireMessage {
                role: "system",
                content: system,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &prompt.user,
        });
        let body = WireRequest {
            model: &self.model,
            messages,
            temperature: prompt.params.temperature,
            max_tokens: prompt.params.max_tokens,
            stop: prompt.params.stop.as_ref(),
        };
        let mut request = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| GatewayError::Transport {
            detail: e.to_string(),
        })?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let detail = response.text().unwrap_or_default();
            let detail = detail.chars().take(200).collect();
            return Err(GatewayError::Status { status, detail });
        }
        let parsed: WireResponse = response.json().map_err(|e| GatewayError::Transport {
            detail: format!("invalid response body: {e}"),
        })?;
        let text = parsed
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .filter(|t| !t.is_empty())
            .ok_or(GatewayError::MissingText)?;
        let (prompt_tokens, completion_tokens) = match parsed.usage {
            Some(usage) => (usage.prompt_tokens, usage.completion_tokens),
            // Some servers omit usage; fall back to word counts.
            None => (approx_tokens(prompt), text::word_count(&text) as u64),
        };
        Ok(BackendCompletion {
            text,
            prompt_tokens,
            completion_tokens,
        })
    }
}
