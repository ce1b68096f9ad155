//! Run configuration: endpoints, stage sampling parameters, cue set,
//! bad-word list, paths, seeds, and concurrency bounds, loaded from a TOML
//! file with field-path validation errors. Secrets never live in the file;
//! endpoints name an environment variable holding the API key.

use crate::domain::{CueSet, DEFAULT_CUES};
use crate::expand::DEFAULT_BAD_WORDS;
use crate::evalharness::EvalMode;
use crate::modelio::{PrefillStrategy, RetryPolicy, SamplingParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("config error at {field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub kind: EndpointKind,
    pub model_id: String,
    #[serde(default)]
    pub base_url: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_prefill_strategy")]
    pub prefill_strategy: PrefillStrategy,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Salt for the synthetic mock responder.
    #[serde(default)]
    pub mock_salt: u64,
}

fn default_prefill_strategy() -> PrefillStrategy {
    PrefillStrategy::ChatContinue
}

fn default_timeout_secs() -> u64 {
    120
}

impl EndpointConfig {
    fn validate(&self, path: &str) -> Result<(), ConfigError> {
        if self.model_id.trim().is_empty() {
            return Err(ConfigError::new(format!("{path}.model_id"), "must be nonempty"));
        }
        if self.kind == EndpointKind::Http
            && self.base_url.as_deref().is_none_or(|u| u.trim().is_empty())
        {
            return Err(ConfigError::new(
                format!("{path}.base_url"),
                "required for http endpoints",
            ));
        }
        Ok(())
    }

    /// Resolves the API key from the configured environment variable.
    pub fn api_key(&self) -> Option<String> {
        self.api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|v| !v.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub qgen_model: EndpointConfig,
    pub vlm_model: EndpointConfig,
    pub reason_model: EndpointConfig,
    pub eval_model: EndpointConfig,
}

impl Endpoints {
    pub fn get(&self, name: &str) -> &EndpointConfig {
        match name {
            "qgen_model" => &self.qgen_model,
            "vlm_model" => &self.vlm_model,
            "reason_model" => &self.reason_model,
            "eval_model" => &self.eval_model,
            other => panic!("unknown endpoint {other}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub corpus: PathBuf,
    pub workdir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub benchmark: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    #[serde(default = "default_stage1_params")]
    pub params: SamplingParams,
    #[serde(default)]
    pub force_reparse: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config { params: default_stage1_params(), force_reparse: false }
    }
}

fn default_stage1_params() -> SamplingParams {
    SamplingParams {
        temperature: 0.7,
        top_p: 1.0,
        top_k: None,
        repetition_penalty: 1.0,
        n: 1,
        max_new_tokens: 2048,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    #[serde(default = "default_stage2_params")]
    pub params: SamplingParams,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config { params: default_stage2_params() }
    }
}

fn default_stage2_params() -> SamplingParams {
    SamplingParams {
        temperature: 0.7,
        top_p: 0.8,
        top_k: None,
        repetition_penalty: 1.05,
        n: 3,
        max_new_tokens: 1024,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Config {
    #[serde(default = "default_stage3_params")]
    pub params: SamplingParams,
    #[serde(default = "default_stage3_stop")]
    pub stop: Option<Vec<String>>,
    #[serde(default = "default_cues_per_seed")]
    pub cues_per_seed: usize,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            params: default_stage3_params(),
            stop: default_stage3_stop(),
            cues_per_seed: default_cues_per_seed(),
        }
    }
}

fn default_stage3_params() -> SamplingParams {
    SamplingParams {
        temperature: 0.7,
        top_p: 0.8,
        top_k: Some(50),
        repetition_penalty: 1.05,
        n: 3,
        max_new_tokens: 1024,
    }
}

fn default_stage3_stop() -> Option<Vec<String>> {
    Some(vec!["</answer>".to_string()])
}

fn default_cues_per_seed() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_eval_mode")]
    pub mode: EvalMode,
    #[serde(default = "default_eval_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "default_text_only_tokens")]
    pub text_only_max_new_tokens: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: default_eval_mode(),
            max_new_tokens: default_eval_tokens(),
            text_only_max_new_tokens: default_text_only_tokens(),
        }
    }
}

fn default_eval_mode() -> EvalMode {
    EvalMode::Think
}

fn default_eval_tokens() -> u32 {
    1024
}

fn default_text_only_tokens() -> u32 {
    2048
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    #[serde(default = "default_rollout_n")]
    pub n: u32,
    #[serde(default = "default_rollout_temperature")]
    pub temperature: f64,
    #[serde(default = "default_rollout_mode")]
    pub mode: EvalMode,
    #[serde(default = "default_eval_tokens")]
    pub max_new_tokens: u32,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            n: default_rollout_n(),
            temperature: default_rollout_temperature(),
            mode: default_rollout_mode(),
            max_new_tokens: default_eval_tokens(),
        }
    }
}

fn default_rollout_n() -> u32 {
    11
}

fn default_rollout_temperature() -> f64 {
    0.7
}

fn default_rollout_mode() -> EvalMode {
    EvalMode::Direct
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggingMode {
    Lexical,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeConfig {
    #[serde(default = "default_tagging_mode")]
    pub tagging: TaggingMode,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig { tagging: default_tagging_mode() }
    }
}

fn default_tagging_mode() -> TaggingMode {
    TaggingMode::Lexical
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// 0 = unlimited correctness_seed pairs per question.
    #[serde(default)]
    pub correctness_pair_cap: usize,
    /// Fraction of rows routed to a holdout file; 0 disables the split.
    #[serde(default)]
    pub holdout_ratio: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { correctness_pair_cap: 0, holdout_ratio: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub endpoints: Endpoints,
    pub paths: Paths,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub stage3: Stage3Config,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub rollouts: RolloutConfig,
    #[serde(default)]
    pub analyze: AnalyzeConfig,
    #[serde(default)]
    pub datasets: DatasetConfig,
    #[serde(default = "default_cues")]
    pub cues: Vec<String>,
    #[serde(default = "default_bad_words")]
    pub bad_words: Vec<String>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Per-item failure fraction above which a stage exits with a partial
    /// failure code.
    #[serde(default)]
    pub partial_failure_threshold: f64,

    /// Directory the config file lives in; relative paths resolve against
    /// it.
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// Digest of the raw config file bytes, recorded in manifests.
    #[serde(skip)]
    pub digest: String,
}

fn default_cues() -> Vec<String> {
    DEFAULT_CUES.iter().map(|s| s.to_string()).collect()
}

fn default_bad_words() -> Vec<String> {
    DEFAULT_BAD_WORDS.iter().map(|s| s.to_string()).collect()
}

fn default_max_in_flight() -> usize {
    4
}

impl Config {
    pub fn cue_set(&self) -> CueSet {
        CueSet::new(self.cues.clone())
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.resolve(&self.paths.corpus)
    }

    pub fn workdir(&self) -> PathBuf {
        self.resolve(&self.paths.workdir)
    }

    pub fn cache_dir(&self) -> PathBuf {
        match &self.paths.cache_dir {
            Some(dir) => self.resolve(dir),
            None => self.workdir().join("cache"),
        }
    }

    pub fn benchmark_path(&self) -> Option<PathBuf> {
        self.paths.benchmark.as_ref().map(|p| self.resolve(p))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for name in ["qgen_model", "vlm_model", "reason_model", "eval_model"] {
            self.endpoints.get(name).validate(&format!("endpoints.{name}"))?;
        }
        let check_params = |field: &str, params: &SamplingParams| {
            params.validate().map_err(|e| ConfigError::new(field, e.to_string()))
        };
        check_params("stage1.params", &self.stage1.params)?;
        check_params("stage2.params", &self.stage2.params)?;
        check_params("stage3.params", &self.stage3.params)?;
        if self.cues.is_empty() {
            return Err(ConfigError::new("cues", "at least one cue marker is required"));
        }
        if self.stage3.cues_per_seed == 0 {
            return Err(ConfigError::new("stage3.cues_per_seed", "must be at least 1"));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::new("max_in_flight", "must be at least 1"));
        }
        if self.rollouts.n == 0 {
            return Err(ConfigError::new("rollouts.n", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.partial_failure_threshold) {
            return Err(ConfigError::new("partial_failure_threshold", "must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.datasets.holdout_ratio) {
            return Err(ConfigError::new("datasets.holdout_ratio", "must be in [0,1]"));
        }
        if self.paths.corpus.as_os_str().is_empty() {
            return Err(ConfigError::new("paths.corpus", "must be nonempty"));
        }
        if self.paths.workdir.as_os_str().is_empty() {
            return Err(ConfigError::new("paths.workdir", "must be nonempty"));
        }
        Ok(())
    }
}

/// Loads and validates a config file.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
    let mut config: Config =
        toml::from_str(&text).map_err(|e| ConfigError::new("<parse>", e.to_string()))?;
    config.base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    config.digest = hex::encode(hasher.finalize());
    config.validate()?;
    Ok(config)
}
