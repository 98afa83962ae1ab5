use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticConfig;
use crate::evaluation::EvalConfig;
use crate::localizer::{LocalizerArch, LocalizerTrainConfig};
use crate::numerics::optim::{AdamWConfig, LrSchedule};
use crate::ranking::InferenceConfig;
use crate::retriever::{ModelConfig, RetrieverTrainConfig};

use super::DriverError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic(SyntheticConfig),
    /// Path to an existing corpus manifest.
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    /// Numbers of retrieved videos to sweep; the largest sets the rank range.
    pub ks: Vec<usize>,
    pub iou: f64,
    /// Extra baseline α values reported by `bias-report`.
    pub alpha_sweep: Vec<f64>,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            ks: (1..=10).collect(),
            iou: 0.5,
            alpha_sweep: vec![0.0, 1.0, 5.0, 20.0, 100.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    pub model: ModelConfig,
    pub localizer_arch: LocalizerArch,
    pub retriever_training: RetrieverTrainConfig,
    pub localizer_training: LocalizerTrainConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvalConfig,
    pub bias: BiasConfig,
    /// Output directory; the `--out-dir` flag overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// Laptop-sized training schedule.
    Desk,
    /// Training schedule of the original experiments.
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let desk_opt = AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        };
        let desk = Self {
            seed: 0,
            corpus: CorpusSource::Synthetic(SyntheticConfig::default()),
            model: ModelConfig {
                d_model: 32,
                n_heads: 4,
                ff_mult: 4,
                max_len: 128,
            },
            localizer_arch: LocalizerArch::default(),
            retriever_training: RetrieverTrainConfig {
                batch_size: 32,
                epochs: 30,
                optimizer: desk_opt.clone(),
            },
            localizer_training: LocalizerTrainConfig {
                batch_size: 8,
                epochs: 10,
                n_negatives: 4,
                negative_pool: 10,
                optimizer: AdamWConfig {
                    schedule: LrSchedule::Linear,
                    ..desk_opt
                },
            },
            inference: InferenceConfig::default(),
            evaluation: EvalConfig::default(),
            bias: BiasConfig::default(),
            out_dir: None,
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => Self {
                retriever_training: RetrieverTrainConfig {
                    batch_size: 256,
                    epochs: 100,
                    optimizer: AdamWConfig::default(),
                },
                localizer_training: LocalizerTrainConfig {
                    batch_size: 32,
                    epochs: 10,
                    n_negatives: 4,
                    negative_pool: 100,
                    optimizer: AdamWConfig::default(),
                },
                ..desk
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self, DriverError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            DriverError::Config(describe_config_error(&e.path().to_string(), &e.inner().to_string()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, DriverError> {
        let text = std::fs::read_to_string(path).map_err(|e| DriverError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            DriverError::Config(m) => DriverError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        let named = |field: &str, e: String| DriverError::Config(format!("{field}: {e}"));
        if let CorpusSource::Synthetic(s) = &self.corpus {
            s.validate().map_err(|e| named("corpus.synthetic", e.to_string()))?;
        }
        self.model.validate().map_err(|e| named("model", e.to_string()))?;
        self.inference.validate().map_err(|e| named("inference", e.to_string()))?;
        if self.retriever_training.batch_size == 0 || self.localizer_training.batch_size == 0 {
            return Err(DriverError::Config("batch_size must be at least 1".into()));
        }
        if self.evaluation.ks.contains(&0) || self.bias.ks.contains(&0) {
            return Err(DriverError::Config("evaluation and bias K values must be at least 1".into()));
        }
        if self.bias.ks.is_empty() {
            return Err(DriverError::Config("bias.ks must not be empty".into()));
        }
        if self.bias.ks.iter().any(|&k| k > self.inference.top_k) {
            return Err(DriverError::Config(format!(
                "bias.ks must not exceed inference.top_k ({})",
                self.inference.top_k
            )));
        }
        Ok(())
    }
}

/// Turn a serde error at `path` into a message naming the full field path.
fn describe_config_error(path: &str, message: &str) -> String {
    let join = |field: &str| {
        if path.is_empty() || path == "." {
            field.to_string()
        } else {
            format!("{path}.{field}")
        }
    };
    let quoted = |m: &str| m.split('`').nth(1).map(str::to_string);
    if let Some(field) = message.strip_prefix("missing field ").and_then(quoted) {
        return format!("missing required field `{}`", join(&field));
    }
    if let Some(field) = message.strip_prefix("unknown field ").and_then(quoted) {
        return format!("unknown field `{}`", join(&field));
    }
    if path.is_empty() || path == "." {
        message.to_string()
    } else {
        format!("`{path}`: {message}")
    }
}
