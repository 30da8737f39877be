//! Run configuration: one TOML document per run, named presets and
//! dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_jsonl, split, synthetic_batch, GroundTruth, RankedExample, SyntheticTaskSpec,
};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_TIE_BAND;
use crate::model::ModelConfig;
use crate::pipeline::StageConfig;
use crate::ppo::PpoConfig;

pub const PRESETS: [&str; 4] = [
    "synthetic-small",
    "gpt4llm-like",
    "summarize-like",
    "stackexchange-like",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Jsonl {
        path: PathBuf,
    },
    Synthetic {
        spec: SyntheticTaskSpec,
        examples: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tie_band: f64,
    /// Validation prompts sampled per evaluation; 0 means all.
    pub prompts: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tie_band: DEFAULT_TIE_BAND,
            prompts: 0,
            max_new_tokens: 16,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// PPO method by registry name.
    pub method: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub data: DataSource,
    pub sft: StageConfig,
    pub rm: StageConfig,
    pub hydra_sft: StageConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        preset("synthetic-small").expect("built-in preset")
    }
}

/// Data split into training and validation examples.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Vec<RankedExample>,
    pub val: Vec<RankedExample>,
    pub ground_truth: Option<GroundTruth>,
    pub skipped: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sft.validate()?;
        self.rm.validate()?;
        self.hydra_sft.validate()?;
        self.ppo.validate()?;
        crate::ppo::method_by_name(&self.method)?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} must lie in [0, 1)",
                self.val_fraction
            )));
        }
        if let DataSource::Synthetic { spec, examples } = &self.data {
            spec.validate()?;
            if *examples == 0 {
                return Err(Error::Config("synthetic data needs examples >= 1".into()));
            }
        }
        if self.ppo.max_new_tokens + 3 > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "ppo.max_new_tokens {} leaves no prompt room in max_seq_len {}",
                self.ppo.max_new_tokens, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })
    }

    /// Sets `section.key = value`. The value is parsed as a TOML literal,
    /// falling back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let (sections, last) = match key.rsplit_once('.') {
            Some((head, last)) => (head.split('.').collect::<Vec<_>>(), last),
            None => (Vec::new(), key),
        };
        let mut node = &mut tree;
        for part in sections {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown section {part} in {key}")))?;
        }
        let slot = node
            .as_table_mut()
            .and_then(|t| t.get_mut(last))
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        // integers given for float fields stay floats
        *slot = match (&*slot, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
            (_, v) => v,
        };
        let updated: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Loads or generates the examples and splits them by prompt hash.
    pub fn load_data(&self) -> Result<LoadedData> {
        let (examples, ground_truth, skipped) = match &self.data {
            DataSource::Jsonl { path } => {
                let corpus = load_jsonl(path)?;
                for s in &corpus.skipped {
                    log::warn!("{}:{} skipped: {}", path.display(), s.line, s.reason);
                }
                (corpus.examples, None, corpus.skipped.len())
            }
            DataSource::Synthetic { spec, examples } => {
                let (ex, gt) = synthetic_batch(spec, *examples)?;
                (ex, Some(gt), 0)
            }
        };
        let (train, val) = split(examples, self.val_fraction);
        if train.is_empty() {
            return Err(Error::Data("no training examples".into()));
        }
        Ok(LoadedData {
            train,
            val,
            ground_truth,
            skipped,
        })
    }
}

fn stage(lr: f64, batch_size: usize, grad_accum: usize, epochs: usize) -> StageConfig {
    StageConfig {
        lr,
        batch_size,
        grad_accum,
        epochs,
        ..StageConfig::default()
    }
}

/// Built-in configurations. The dataset-shaped presets keep the relative
/// structure of published per-dataset hyperparameters (batch size,
/// accumulation, epochs, reward multiplier, critic multiplier) at desk-scale
/// model sizes and learning rates.
pub fn preset(name: &str) -> Result<RunConfig> {
    let synthetic_model = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 24,
        ..ModelConfig::default()
    };
    let base = RunConfig {
        method: "hydra".into(),
        seed: 0,
        out_dir: PathBuf::from("runs"),
        val_fraction: 0.1,
        model: synthetic_model,
        data: DataSource::Synthetic {
            spec: SyntheticTaskSpec::default(),
            examples: 900,
        },
        sft: stage(3e-3, 16, 1, 4),
        rm: stage(3e-3, 16, 1, 4),
        hydra_sft: StageConfig {
            warmup: 20,
            ..stage(3e-3, 16, 1, 4)
        },
        ppo: PpoConfig {
            iterations: 200,
            generation_batch: 16,
            minibatch_size: 8,
            max_new_tokens: 9,
            actor_lr: 5e-3,
            critic_lr: 5e-3,
            warmup: 10,
            ..PpoConfig::default()
        },
        eval: EvalConfig {
            max_new_tokens: 9,
            ..EvalConfig::default()
        },
    };
    let jsonl = |file: &str| DataSource::Jsonl {
        path: PathBuf::from(file),
    };
    let wide = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 128,
        ..ModelConfig::default()
    };
    let cfg = match name {
        "synthetic-small" => base,
        "gpt4llm-like" => RunConfig {
            model: wide.clone(),
            data: jsonl("data/gpt4llm.jsonl"),
            sft: stage(1e-3, 4, 1, 3),
            rm: stage(5e-3, 4, 1, 3),
            hydra_sft: StageConfig {
                gamma: 0.1,
                ..stage(3e-4, 4, 1, 3)
            },
            ppo: PpoConfig {
                generation_batch: 8,
                minibatch_size: 8,
                grad_accum: 5,
                actor_lr: 5e-3,
                critic_lr: 5e-5,
                critic_loss_multiplier: 0.1,
                max_new_tokens: 64,
                ..base.ppo.clone()
            },
            eval: EvalConfig {
                max_new_tokens: 64,
                ..EvalConfig::default()
            },
            ..base.clone()
        },
        "summarize-like" => RunConfig {
            model: ModelConfig {
                max_seq_len: 192,
                ..wide.clone()
            },
            data: jsonl("data/summarize.jsonl"),
            sft: stage(1e-3, 3, 3, 7),
            rm: stage(5e-3, 1, 4, 3),
            hydra_sft: StageConfig {
                gamma: 0.1,
                ..stage(5e-5, 1, 10, 4)
            },
            ppo: PpoConfig {
                generation_batch: 4,
                minibatch_size: 4,
                grad_accum: 30,
                actor_lr: 5e-4,
                critic_lr: 5e-5,
                critic_loss_multiplier: 3.0,
                max_new_tokens: 64,
                ..base.ppo.clone()
            },
            eval: EvalConfig {
                max_new_tokens: 64,
                ..EvalConfig::default()
            },
            ..base.clone()
        },
        "stackexchange-like" => RunConfig {
            model: ModelConfig {
                max_seq_len: 160,
                ..wide
            },
            data: jsonl("data/stackexchange.jsonl"),
            sft: stage(1e-3, 1, 6, 4),
            rm: stage(1e-4, 1, 12, 3),
            hydra_sft: StageConfig {
                gamma: 0.07,
                ..stage(5e-5, 1, 6, 6)
            },
            ppo: PpoConfig {
                generation_batch: 3,
                minibatch_size: 3,
                grad_accum: 25,
                actor_lr: 7e-4,
                critic_lr: 8e-4,
                critic_loss_multiplier: 3.0,
                max_new_tokens: 80,
                ..base.ppo.clone()
            },
            eval: EvalConfig {
                max_new_tokens: 80,
                ..EvalConfig::default()
            },
            ..base.clone()
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other}; known: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg, "{name}");
        }
        assert!(preset("tiny").is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[ppo]\nkl_beta = 0.05\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.ppo.kl_beta, 0.05);
        assert_eq!(cfg.ppo.gae_lambda, 0.95);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("ppo.actor_lr", "1e-4").unwrap();
        cfg.set("ppo.iterations", "7").unwrap();
        cfg.set("ppo.kl_beta", "0").unwrap();
        cfg.set("method", "lora").unwrap();
        assert_eq!(
            (cfg.ppo.actor_lr, cfg.ppo.iterations, cfg.ppo.kl_beta),
            (1e-4, 7, 0.0)
        );
        assert_eq!(cfg.method, "lora");
        assert!(cfg.set("ppo.nope", "1").is_err());
        assert!(cfg.set("ppo.clip_epsilon", "2").is_err());
        assert!(cfg.set("method", "sgd").is_err());
        assert_eq!(cfg.ppo.clip_epsilon, 0.2);
    }
}
