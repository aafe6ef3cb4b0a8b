use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, GdtError, Result};
use crate::evalrollout::EnvSpec;
use crate::graphrep::{ConnectionMode, RewardSetting};
use crate::model::{LossKind, ModelConfig, SeqConfig};
use crate::ndcore::layers::Activation;
use crate::ndcore::{AdamConfig, LrSchedule};
use crate::seqformer::StMethod;

/// Variants swept by `ablate`, one list per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub connection: Vec<ConnectionMode>,
    pub reward: Vec<RewardSetting>,
    pub length: Vec<usize>,
    pub stmethod: Vec<StMethod>,
    /// Training seeds per variant.
    pub seeds: Vec<u64>,
    /// Evaluation seeds per trained model.
    pub eval_seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            connection: vec![
                ConnectionMode::Causal,
                ConnectionMode::Full,
                ConnectionMode::Random { p: None, seed: 0 },
                ConnectionMode::None,
            ],
            reward: RewardSetting::ALL.to_vec(),
            length: vec![2, 4, 8],
            stmethod: StMethod::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            eval_seeds: vec![0, 1, 2],
        }
    }
}

/// Everything a training run needs besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Dataset path; the command line may override it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Evaluation environment. Defaults to the `env` entry of the dataset
    /// metadata; without either, epochs are not evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvSpec>,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Returns and rewards are divided by this before embedding.
    pub rtg_scale: f32,
    pub loss: LossKind,
    pub eval_episodes: usize,
    /// Conditioning target for evaluation; defaults to the optimal return.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rtg_floor: Option<f64>,
    pub model: ModelConfig,
    pub seqformer: SeqConfig,
    pub optim: AdamConfig,
    pub schedule: LrSchedule,
    pub ablate: AblateConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("atari").expect("built-in preset")
    }
}

impl TrainConfig {
    pub const PRESETS: [&'static str; 5] = ["atari", "atari-plus", "gym", "gym-plus", "toy"];

    /// Built-in hyperparameter sets: the published Atari and Gym settings
    /// for both networks, and a small one for the toy environments.
    pub fn preset(name: &str) -> Result<Self> {
        let k = 30;
        let atari = Self {
            seed: 0,
            data: None,
            env: None,
            batch: 128,
            epochs: 10,
            steps_per_epoch: 1000,
            rtg_scale: 1.0,
            loss: LossKind::CrossEntropy,
            eval_episodes: 10,
            eval_target: None,
            rtg_floor: None,
            model: ModelConfig {
                context: k,
                ..ModelConfig::default()
            },
            seqformer: SeqConfig::default(),
            optim: AdamConfig::default(),
            schedule: LrSchedule::Cosine {
                base: 6e-4,
                warmup_tokens: 512.0 * 20.0,
                final_tokens: 6.0 * 500_000.0 * k as f64,
                min_ratio: 0.1,
            },
            ablate: AblateConfig::default(),
        };
        let gym = Self {
            batch: 64,
            steps_per_epoch: 10_000,
            rtg_scale: 1000.0,
            model: ModelConfig {
                context: 20,
                activation: Activation::Relu,
                ..atari.model.clone()
            },
            optim: AdamConfig {
                grad_clip: 0.25,
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
            schedule: LrSchedule::Warmup {
                base: 1e-4,
                warmup_steps: 1e5,
            },
            ..atari.clone()
        };
        let cfg = match name {
            "atari" => atari,
            "atari-plus" => Self {
                batch: 64,
                seqformer: SeqConfig {
                    enabled: true,
                    ..SeqConfig::default()
                },
                schedule: LrSchedule::Cosine {
                    base: 6e-4,
                    warmup_tokens: 512.0 * 20.0,
                    final_tokens: 10.0 * 500_000.0 * k as f64,
                    min_ratio: 0.1,
                },
                ..atari
            },
            "gym" => gym,
            "gym-plus" => Self {
                seqformer: SeqConfig {
                    enabled: true,
                    method: StMethod::Fusion,
                    patch: 14,
                    width: 256,
                    layers: 6,
                    heads: 8,
                },
                ..gym
            },
            "toy" => Self {
                batch: 32,
                epochs: 4,
                steps_per_epoch: 150,
                rtg_scale: 1.0,
                eval_episodes: 10,
                model: ModelConfig {
                    context: 4,
                    width: 32,
                    layers: 2,
                    heads: 2,
                    dropout: 0.0,
                    max_timestep: 64,
                    ..ModelConfig::default()
                },
                optim: AdamConfig {
                    weight_decay: 1e-4,
                    ..AdamConfig::default()
                },
                schedule: LrSchedule::Warmup {
                    base: 3e-3,
                    warmup_steps: 20.0,
                },
                ..atari
            },
            other => {
                return Err(GdtError::Config(format!(
                    "unknown preset `{other}` (expected one of {})",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Parses a TOML document. A top-level `preset` key selects the base
    /// values that the remaining keys override.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| GdtError::Config(e.to_string()))?;
        let base = match table.remove("preset") {
            Some(toml::Value::String(name)) => Self::preset(&name)?,
            Some(other) => {
                return Err(GdtError::Config(format!(
                    "preset must be a string, got {other}"
                )))
            }
            None => Self::default(),
        };
        let mut merged =
            toml::Table::try_from(&base).map_err(|e| GdtError::Config(e.to_string()))?;
        merge(&mut merged, table);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| GdtError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GdtError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            GdtError::Config(msg) => GdtError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.batch > 0, "batch must be positive");
        contract!(self.epochs > 0, "epochs must be positive");
        contract!(self.steps_per_epoch > 0, "steps_per_epoch must be positive");
        contract!(
            self.rtg_scale.is_finite() && self.rtg_scale > 0.0,
            "rtg_scale must be positive"
        );
        contract!(
            self.schedule.base() >= 0.0,
            "learning rate must be non-negative"
        );
        self.model.validate(&self.seqformer)
    }

    /// Tokens consumed per optimizer step, for token-budget schedules.
    pub fn tokens_per_step(&self) -> u64 {
        (self.batch * self.model.context) as u64
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            // a tagged table naming its variant replaces the base wholesale
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => {
                merge(b, o)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_published_hyperparameters() {
        let a = TrainConfig::preset("atari").unwrap();
        assert_eq!((a.model.layers, a.model.heads, a.model.width), (6, 8, 128));
        assert_eq!((a.batch, a.model.context, a.epochs), (128, 30, 10));
        assert_eq!(a.model.dropout, 0.1);
        assert_eq!(
            (a.model.activation, a.model.encoder_activation),
            (Activation::Gelu, Activation::Relu)
        );
        assert_eq!(a.optim.betas, (0.9, 0.95));
        assert_eq!((a.optim.grad_clip, a.optim.weight_decay), (1.0, 0.1));
        assert_eq!(
            a.schedule,
            LrSchedule::Cosine {
                base: 6e-4,
                warmup_tokens: 10240.0,
                final_tokens: 9e7,
                min_ratio: 0.1
            }
        );
        let p = TrainConfig::preset("atari-plus").unwrap();
        assert!(p.seqformer.enabled);
        assert_eq!(p.seqformer.method, StMethod::Stack);
        assert_eq!(
            (
                p.seqformer.layers,
                p.seqformer.patch,
                p.seqformer.heads,
                p.seqformer.width
            ),
            (2, 14, 4, 64)
        );
        assert_eq!(p.batch, 64);
        let g = TrainConfig::preset("gym").unwrap();
        assert_eq!(
            (g.batch, g.model.context, g.model.activation),
            (64, 20, Activation::Relu)
        );
        assert_eq!((g.optim.grad_clip, g.optim.weight_decay), (0.25, 1e-4));
        assert_eq!(
            g.schedule,
            LrSchedule::Warmup {
                base: 1e-4,
                warmup_steps: 1e5
            }
        );
        let gp = TrainConfig::preset("gym-plus").unwrap();
        assert_eq!(gp.seqformer.method, StMethod::Fusion);
        assert_eq!(
            (gp.seqformer.layers, gp.seqformer.heads, gp.seqformer.width),
            (6, 8, 256)
        );
        assert!(TrainConfig::preset("mujoco").is_err());
    }

    #[test]
    fn file_overrides_preset() {
        let cfg = TrainConfig::from_toml(
            r#"
            preset = "toy"
            seed = 5
            env = "chain:6"
            [model]
            context = 3
            connection = "random:0.25"
            [schedule]
            kind = "constant"
            base = 0.01
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.env, Some("chain:6".parse().unwrap()));
        assert_eq!(cfg.model.context, 3);
        assert_eq!(cfg.model.width, 32);
        assert_eq!(
            cfg.model.connection,
            ConnectionMode::Random {
                p: Some(0.25),
                seed: 0
            }
        );
        assert_eq!(cfg.schedule, LrSchedule::Constant { base: 0.01 });
        let again = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(TrainConfig::from_toml("batch = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("[model]\nheads = 5").is_err());
        assert!(TrainConfig::from_toml("preset = 3").is_err());
    }
}
