//! Effective run configuration: defaults, then a config file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use compdesc_core::catalog::{ClassText, DEFAULT_NEIGHBORS};
use compdesc_core::classifier::BankMode;
use compdesc_core::descriptor::GenerationConfig;
use compdesc_core::eval::{Protocol, DEFAULT_SHOT_GRID};
use compdesc_core::filter::{FilterPolicy, Shots, TextMode, DEFAULT_BOUND_CAP, DEFAULT_K};
use compdesc_core::util::Clock;
use serde::{Deserialize, Serialize};

pub const ENV_CACHE: &str = "COMPDESC_CACHE";
pub const ENV_LLM_URL: &str = compdesc_core::descriptor::llm::ENV_URL;
pub const ENV_SOURCE_DATE_EPOCH: &str = "SOURCE_DATE_EPOCH";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    /// Chat-completions URL; falls back to `COMPDESC_LLM_URL`.
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Concurrent requests per class.
    pub jobs: usize,
    pub max_retries: u32,
    pub timeout_s: u64,
    pub dedup: bool,
}

impl Default for LlmSettings {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            endpoint: None,
            model: g.model_id,
            temperature: g.temperature,
            max_tokens: g.max_tokens,
            jobs: g.max_in_flight,
            max_retries: 3,
            timeout_s: 60,
            dedup: g.dedup,
        }
    }
}

/// Everything that determines a command's output. The LLM token is never
/// part of it; it is read from `COMPDESC_LLM_TOKEN` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub n: usize,
    pub class_text: ClassText,
    pub similar: Option<PathBuf>,
    pub descriptors: Option<PathBuf>,
    pub filtered: Option<PathBuf>,
    pub k: usize,
    pub shots: Shots,
    pub bound_cap: f64,
    pub text_mode: TextMode,
    pub seed: u64,
    pub protocol: Protocol,
    /// Defaults to 5 for randomized protocols, else 1.
    pub repeats: Option<usize>,
    pub shot_grid: Vec<usize>,
    pub mode: BankMode,
    pub explain: bool,
    pub llm: LlmSettings,
    pub cache: Option<PathBuf>,
    pub offline: bool,
    pub replay: Option<PathBuf>,
    pub force: bool,
    pub fixed_clock: Option<i64>,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out: PathBuf::from("out"),
            n: DEFAULT_NEIGHBORS,
            class_text: ClassText::Prompt,
            similar: None,
            descriptors: None,
            filtered: None,
            k: DEFAULT_K,
            shots: Shots::All,
            bound_cap: DEFAULT_BOUND_CAP,
            text_mode: TextMode::DescriptorPrompt,
            seed: 0,
            protocol: Protocol::Baseline,
            repeats: None,
            shot_grid: DEFAULT_SHOT_GRID.to_vec(),
            mode: BankMode::DescriptorEnsemble,
            explain: false,
            llm: LlmSettings::default(),
            cache: None,
            offline: false,
            replay: None,
            force: false,
            fixed_clock: None,
            jobs: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file. Accepts a bare RunConfig or any artifact that
    /// embeds one under a top-level `config` key.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(inner) = value.get_mut("config").filter(|v| v.is_object()) {
            value = inner.take();
        }
        serde_json::from_value(value).with_context(|| format!("config {}", path.display()))
    }

    /// Fills unset values from the environment.
    pub fn resolve_env(&mut self) -> anyhow::Result<()> {
        if self.cache.is_none() {
            self.cache = std::env::var_os(ENV_CACHE).map(PathBuf::from);
        }
        if self.llm.endpoint.is_none() {
            self.llm.endpoint = std::env::var(ENV_LLM_URL).ok();
        }
        if self.fixed_clock.is_none() {
            if let Ok(v) = std::env::var(ENV_SOURCE_DATE_EPOCH) {
                match v.trim().parse() {
                    Ok(t) => self.fixed_clock = Some(t),
                    Err(_) => bail!("{ENV_SOURCE_DATE_EPOCH} must be an integer, got {v:?}"),
                }
            }
        }
        Ok(())
    }

    pub fn clock(&self) -> Clock {
        self.fixed_clock.map_or(Clock::System, Clock::Fixed)
    }

    pub fn policy(&self) -> FilterPolicy {
        FilterPolicy {
            k: self.k,
            bound_cap: self.bound_cap,
            shots: self.shots,
            rng_seed: self.seed,
            text_mode: self.text_mode,
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            model_id: self.llm.model.clone(),
            temperature: self.llm.temperature,
            max_tokens: self.llm.max_tokens,
            dedup: self.llm.dedup,
            max_in_flight: self.llm.jobs,
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out.join("llm_cache.jsonl"))
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
