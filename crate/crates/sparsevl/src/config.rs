//! TOML run configuration.
//!
//! Every section is optional and falls back to the defaults below; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparsevl_core::model::ModelConfig;
use sparsevl_core::predictor::PredictorConfig;
use sparsevl_core::sparse::{Policy, Selection, SparsityConfig};
use sparsevl_core::train::{Optimizer, TrainConfig};

use crate::task::{TaskSpec, MIN_VOCAB};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            vocab_size: 32,
            max_seq_len: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub width: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub block_ffn_ratio: usize,
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self {
            width: 16,
            num_heads: 2,
            num_blocks: 2,
            block_ffn_ratio: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionName {
    Argmax,
    Topk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    Learned,
    Random,
    Structure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsitySection {
    pub sparsify_layer: usize,
    pub image_keep_rate: f64,
    pub output_keep_rate: f64,
    pub selection: SelectionName,
    pub policy: PolicyName,
}

impl Default for SparsitySection {
    fn default() -> Self {
        let d = SparsityConfig::default();
        Self {
            sparsify_layer: d.sparsify_layer,
            image_keep_rate: d.image_keep_rate,
            output_keep_rate: d.output_keep_rate,
            selection: SelectionName::Argmax,
            policy: PolicyName::Learned,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    pub len_ot: usize,
    pub tau_initial: f64,
    pub tau_final: f64,
    pub noise_final: f64,
    pub noise_anneal: f64,
    pub rate_warmup: usize,
    pub lr_model: f64,
    pub lr_predictor: f64,
    pub momentum: f64,
    pub optimizer: OptimizerName,
    /// Zero or negative disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub hard_drop: bool,
    pub predictor_input_grad: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lambda: d.lambda,
            len_ot: d.len_ot,
            tau_initial: d.tau_initial,
            tau_final: d.tau_final,
            noise_final: d.noise_final,
            noise_anneal: d.noise_anneal,
            rate_warmup: d.rate_warmup,
            lr_model: d.lr_model,
            lr_predictor: d.lr_predictor,
            momentum: d.momentum,
            optimizer: match d.optimizer {
                Optimizer::Adam => OptimizerName::Adam,
                Optimizer::Momentum => OptimizerName::Momentum,
            },
            grad_clip: d.grad_clip.unwrap_or(0.0),
            batch_size: d.batch_size,
            total_steps: d.total_steps,
            hard_drop: d.hard_drop,
            predictor_input_grad: d.predictor_input_grad,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    JsonPretty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub output_dir: PathBuf,
    pub report_format: ReportFormat,
    /// Generation budget for `generate`.
    pub max_new_tokens: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            report_format: ReportFormat::JsonPretty,
            max_new_tokens: 64,
        }
    }
}

/// Complete description of a run; together with `seed` it determines every
/// primary output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub predictor: PredictorSection,
    pub sparsity: SparsitySection,
    pub train: TrainSection,
    pub task: TaskSpec,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_heads: m.num_heads,
            ffn_dim: m.ffn_dim,
            vocab_size: m.vocab_size,
            max_seq_len: m.max_seq_len,
            image_feature_dim: self.task.feature_dim,
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        let p = &self.predictor;
        PredictorConfig {
            input_dim: self.model.hidden_dim,
            width: p.width,
            num_heads: p.num_heads,
            num_blocks: p.num_blocks,
            block_ffn_ratio: p.block_ffn_ratio,
        }
    }

    pub fn sparsity_config(&self) -> SparsityConfig {
        let s = &self.sparsity;
        SparsityConfig {
            sparsify_layer: s.sparsify_layer,
            image_keep_rate: s.image_keep_rate,
            output_keep_rate: s.output_keep_rate,
            selection: match s.selection {
                SelectionName::Argmax => Selection::Argmax,
                SelectionName::Topk => Selection::Topk,
            },
            policy: match s.policy {
                PolicyName::Learned => Policy::Learned,
                PolicyName::Random => Policy::Random { seed: self.seed },
                PolicyName::Structure => Policy::Structure,
            },
        }
    }

    /// Training hyper-parameters; keep rates and the sparsification layer
    /// come from the `sparsity` section.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda: t.lambda,
            len_ot: t.len_ot,
            tau_initial: t.tau_initial,
            tau_final: t.tau_final,
            noise_final: t.noise_final,
            noise_anneal: t.noise_anneal,
            rate_warmup: t.rate_warmup,
            lr_model: t.lr_model,
            lr_predictor: t.lr_predictor,
            momentum: t.momentum,
            optimizer: match t.optimizer {
                OptimizerName::Adam => Optimizer::Adam,
                OptimizerName::Momentum => Optimizer::Momentum,
            },
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            seed: self.seed,
            sparsify_layer: self.sparsity.sparsify_layer,
            image_keep_rate: self.sparsity.image_keep_rate,
            output_keep_rate: self.sparsity.output_keep_rate,
            hard_drop: t.hard_drop,
            predictor_input_grad: t.predictor_input_grad,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |section: &str, e: sparsevl_core::Error| {
            let msg = e.to_string();
            let msg = msg.strip_prefix("invalid configuration: ").unwrap_or(&msg).to_string();
            invalid(section, msg)
        };
        self.task.validate().map_err(|e| invalid("task", e.to_string()))?;
        self.model_config().validate().map_err(|e| core("model", e))?;
        if self.model.vocab_size < MIN_VOCAB {
            return Err(invalid(
                "model.vocab_size",
                format!("must be >= {MIN_VOCAB} to hold the task tokens"),
            ));
        }
        let longest = self.task.n_image + 2 + self.task.max_output;
        if self.model.max_seq_len < longest {
            return Err(invalid(
                "model.max_seq_len",
                format!("must be >= {longest} for the configured task"),
            ));
        }
        self.predictor_config().validate().map_err(|e| core("predictor", e))?;
        let layers = self.model.num_layers;
        self.sparsity_config().validate(layers).map_err(|e| core("sparsity", e))?;
        self.train_config().validate(layers).map_err(|e| core("train", e))?;
        if self.run.max_new_tokens == 0 {
            return Err(invalid("run.max_new_tokens", "must be >= 1"));
        }
        Ok(())
    }
}
