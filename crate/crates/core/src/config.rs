//! Pipeline configuration file: one TOML document validated up front.
//!
//! Unknown keys are rejected everywhere so typos fail before any stage runs.
//! Defaults carry the standard operating point: five loop iterations, ten
//! reranked screenshots, a 20-pixel coordinate tolerance, and preference
//! temperature 0.1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::CoordMetric;
use crate::dpo::TrainConfig;
use crate::gateway::EndpointConfig;
use crate::prefs::MaskMode;
use crate::weakness::{FilterRule, LoopOptions, QuerySpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How much visual history gateway-backed policies receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HistoryImages {
    #[default]
    All,
    LastK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    /// "builtin" or a path to a domain TOML file.
    pub source: String,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection { source: "builtin".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub output_root: PathBuf,
    pub seed: u64,
    /// 0 selects the library default worker count.
    pub workers: usize,
    /// Forces scripted stand-ins for every model role.
    pub hermetic: bool,
    pub max_steps: u32,
    pub tolerance_px: u32,
    pub coord_metric: CoordMetric,
    pub filter_rule: FilterRule,
    pub mask_mode: MaskMode,
    pub history_images: HistoryImages,
    /// Screenshots kept in history when `history_images = "last_k"`.
    pub history_images_k: u32,
    pub replay_strip_reasoning: bool,
    /// Directory of editable prompt templates; builtin when empty.
    pub prompt_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            output_root: PathBuf::from("out"),
            seed: 7,
            workers: 0,
            hermetic: true,
            max_steps: 50,
            tolerance_px: 20,
            coord_metric: CoordMetric::Euclidean,
            filter_rule: FilterRule::TeacherPassStudentFail,
            mask_mode: MaskMode::ThreeSpan,
            history_images: HistoryImages::All,
            history_images_k: 4,
            replay_strip_reasoning: false,
            prompt_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub iterations: u32,
    pub screenshot_k: usize,
    pub calls_per_config_per_mode: u32,
    pub instructions_per_call: u32,
    pub instruction_word_cap: usize,
    /// Optional JSONL seed-query file; the builtin seed set when empty.
    pub seed_file: Option<PathBuf>,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            iterations: 5,
            screenshot_k: 10,
            calls_per_config_per_mode: 1,
            instructions_per_call: 3,
            instruction_word_cap: 15,
            seed_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub coord_noise_px: f64,
    pub wrong_function_prob: f64,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection { coord_noise_px: 8.0, wrong_function_prob: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub steps: u32,
    pub lr: f64,
    pub beta: f64,
    pub rank: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection { steps: 300, lr: 0.5, beta: 0.1, rank: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub holdout_count: usize,
    pub embed_dim: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { holdout_count: 60, embed_dim: 16 }
    }
}

/// The whole pipeline configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub domain: DomainSection,
    pub run: RunSection,
    pub generation: GenerationSection,
    pub student: StudentSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
    /// Endpoint configs per model role (teacher, student, verifier,
    /// summarizer, generator, reranker, embedder); required only for
    /// non-hermetic runs.
    pub endpoints: BTreeMap<String, EndpointConfig>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), reason: e.to_string() })?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bail = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.generation.iterations < 1 {
            return bail("generation.iterations must be at least 1");
        }
        if self.generation.screenshot_k < 1 {
            return bail("generation.screenshot_k must be at least 1");
        }
        if self.generation.instructions_per_call < 1 {
            return bail("generation.instructions_per_call must be at least 1");
        }
        if self.run.max_steps < 1 {
            return bail("run.max_steps must be at least 1");
        }
        if !(self.training.beta > 0.0) {
            return bail("training.beta must be positive");
        }
        if !(self.training.lr > 0.0) {
            return bail("training.lr must be positive");
        }
        if self.training.rank < 1 {
            return bail("training.rank must be at least 1");
        }
        if self.student.coord_noise_px < 0.0 {
            return bail("student.coord_noise_px must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.student.wrong_function_prob) {
            return bail("student.wrong_function_prob must lie in [0, 1]");
        }
        if self.domain.source != "builtin" && !Path::new(&self.domain.source).exists() {
            return Err(ConfigError::Invalid(format!(
                "domain.source {:?} does not exist",
                self.domain.source
            )));
        }
        if let Some(seed_file) = &self.generation.seed_file {
            if !seed_file.exists() {
                return Err(ConfigError::Invalid(format!(
                    "generation.seed_file {} does not exist",
                    seed_file.display()
                )));
            }
        }
        if !self.run.hermetic {
            for role in ["teacher", "student", "verifier", "summarizer", "generator", "reranker"] {
                if !self.endpoints.contains_key(role) {
                    return Err(ConfigError::Invalid(format!(
                        "non-hermetic runs need an [endpoints.{role}] entry"
                    )));
                }
            }
        }
        for (role, endpoint) in &self.endpoints {
            endpoint
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("endpoints.{role}: {e}")))?;
        }
        Ok(())
    }

    pub fn loop_options(&self) -> LoopOptions {
        LoopOptions {
            iterations: self.generation.iterations,
            screenshot_k: self.generation.screenshot_k,
            calls_per_config_per_mode: self.generation.calls_per_config_per_mode,
            instructions_per_call: self.generation.instructions_per_call,
            instruction_word_cap: self.generation.instruction_word_cap,
            interrupt_after: None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.training.steps,
            lr: self.training.lr,
            beta: self.training.beta,
            rank: self.training.rank,
            seed: self.run.seed,
        }
    }

    /// Load seed queries from the configured JSONL file, if any.
    pub fn load_seeds(&self) -> Result<Option<Vec<QuerySpec>>, ConfigError> {
        let Some(path) = &self.generation.seed_file else {
            return Ok(None);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.clone(), reason: e.to_string() })?;
        let mut seeds = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let seed: QuerySpec = serde_json::from_str(line).map_err(|e| {
                ConfigError::Invalid(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            seed.validate(self.generation.instruction_word_cap)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            seeds.push(seed);
        }
        if seeds.is_empty() {
            return Err(ConfigError::Invalid(format!("seed file {} is empty", path.display())));
        }
        Ok(Some(seeds))
    }

    /// One-line echo of the load-bearing resolved values.
    pub fn resolved_summary(&self) -> String {
        format!(
            "iterations={} screenshot_k={} tolerance_px={} beta={} filter={} mask={} \
             noise_px={} seed={} hermetic={}",
            self.generation.iterations,
            self.generation.screenshot_k,
            self.run.tolerance_px,
            self.training.beta,
            self.run.filter_rule.as_str(),
            self.run.mask_mode.as_str(),
            self.student.coord_noise_px,
            self.run.seed,
            self.run.hermetic,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_standard_operating_point() {
        let config = PipelineConfig::default();
        config.validate().unwrap();
        assert_eq!(config.generation.iterations, 5);
        assert_eq!(config.generation.screenshot_k, 10);
        assert_eq!(config.run.tolerance_px, 20);
        assert_eq!(config.training.beta, 0.1);
        assert_eq!(config.generation.instructions_per_call, 3);
        assert_eq!(config.generation.calls_per_config_per_mode, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<PipelineConfig>("[run]\nturbo = true\n").unwrap_err();
        assert!(err.to_string().contains("turbo"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut config = PipelineConfig::default();
        config.training.beta = 0.0;
        assert!(config.validate().is_err());
        let mut config = PipelineConfig::default();
        config.generation.iterations = 0;
        assert!(config.validate().is_err());
        let mut config = PipelineConfig::default();
        config.student.wrong_function_prob = 1.5;
        assert!(config.validate().is_err());
    }

    #[test]
    fn non_hermetic_requires_endpoints() {
        let mut config = PipelineConfig::default();
        config.run.hermetic = false;
        assert!(config.validate().is_err());
        for role in ["teacher", "student", "verifier", "summarizer", "generator", "reranker"] {
            config.endpoints.insert(role.into(), EndpointConfig::default());
        }
        config.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip() {
        let config = PipelineConfig::default();
        let text = toml::to_string(&config).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }
}
