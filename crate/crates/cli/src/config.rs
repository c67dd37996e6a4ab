//! Run configuration: one JSON file, unknown keys rejected.
//!
//! Budgets are per record. A token limit of 0 means unlimited.

use std::path::{Path, PathBuf};

use focal_core::eval::{NarrowingConfig, DEFAULT_K_MAX_EVAL, RATIOS_DEFAULT};
use focal_core::focus::{ExplainConfig, ScoutConfig};
use focal_core::models::ModelSpec;
use focal_core::perturb::MaskMode;
use focal_core::surrogate::{KernelConfig, DEFAULT_LAMBDA};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default)]
    pub target_tokens: u64,
    /// Target limit expressed in full-document queries: the per-record limit
    /// becomes this many times the cost of the unperturbed prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_queries: Option<u64>,
    #[serde(default)]
    pub proxy_tokens: u64,
    #[serde(default)]
    pub eval_tokens: u64,
    /// Sample count used when a budget is unlimited.
    #[serde(default = "default_max_samples")]
    pub max_samples: usize,
}

fn default_max_samples() -> usize {
    1000
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            target_tokens: 0,
            target_queries: None,
            proxy_tokens: 0,
            eval_tokens: 0,
            max_samples: default_max_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k_max_eval")]
    pub k_max_eval: usize,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
}

fn default_k_max_eval() -> usize {
    DEFAULT_K_MAX_EVAL
}

fn default_ratios() -> Vec<f64> {
    RATIOS_DEFAULT.to_vec()
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_max_eval: default_k_max_eval(),
            ratios: default_ratios(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarrowConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_k_per_step")]
    pub k_per_step: usize,
}

fn default_steps() -> usize {
    10
}

fn default_k_per_step() -> usize {
    200
}

impl Default for NarrowConfig {
    fn default() -> Self {
        NarrowConfig {
            steps: default_steps(),
            k_per_step: default_k_per_step(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: ModelSpec,
    pub proxy: ModelSpec,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub scout: ScoutConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Cap on nonzero surrogate coefficients (greedy forward selection).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_features: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Concurrent model requests within one record.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Records processed concurrently.
    #[serde(default = "default_record_parallelism")]
    pub record_parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub narrow: NarrowConfig,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_parallelism() -> usize {
    4
}
fn default_record_parallelism() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Config with defaults everywhere except the two models.
    pub fn new(target: ModelSpec, proxy: ModelSpec) -> Self {
        serde_json::from_value(serde_json::json!({ "target": target, "proxy": proxy }))
            .expect("defaults deserialize")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for (name, spec) in [("target", &self.target), ("proxy", &self.proxy)] {
            if let Err(e) = spec.validate() {
                return invalid(format!("{name}: {e}"));
            }
        }
        self.scout.validate().map_err(ConfigError::Invalid)?;
        if !(self.kernel.width > 0.0 && self.kernel.width.is_finite()) {
            return invalid(format!("kernel.width must be positive, got {}", self.kernel.width));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.max_features == Some(0) {
            return invalid("max_features must be >= 1".into());
        }
        if self.budget.target_tokens > 0 && self.budget.target_queries.is_some() {
            return invalid("set budget.target_tokens or budget.target_queries, not both".into());
        }
        if self.budget.target_queries == Some(0) {
            return invalid("budget.target_queries must be >= 1".into());
        }
        if self.budget.max_samples < 2 {
            return invalid("budget.max_samples must be >= 2".into());
        }
        if self.parallelism == 0 || self.record_parallelism == 0 {
            return invalid("parallelism and record_parallelism must be >= 1".into());
        }
        if self.eval.k_max_eval == 0 {
            return invalid("eval.k_max_eval must be >= 1".into());
        }
        if self.eval.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return invalid("eval.ratios must be positive".into());
        }
        if self.narrow.steps == 0 || self.narrow.k_per_step < 2 {
            return invalid("narrow.steps must be >= 1 and narrow.k_per_step >= 2".into());
        }
        if let MaskMode::Replace { token } = &self.mask_mode {
            if token.split_whitespace().count() != 1 {
                return invalid("mask_mode.token must be a single word".into());
            }
        }
        Ok(())
    }

    pub fn explain_config(&self) -> ExplainConfig {
        ExplainConfig {
            scout: self.scout,
            kernel: self.kernel,
            lambda: self.lambda,
            max_samples: self.budget.max_samples,
            parallelism: self.parallelism,
            mask_mode: self.mask_mode.clone(),
            max_features: self.max_features,
        }
    }

    pub fn narrowing_config(&self, seed: u64) -> NarrowingConfig {
        NarrowingConfig {
            steps: self.narrow.steps,
            k_per_step: self.narrow.k_per_step,
            seed,
            k_max_eval: self.eval.k_max_eval,
        }
    }
}
