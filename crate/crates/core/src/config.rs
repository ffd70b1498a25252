//! Declarative run configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmodel::sampler::SamplerConfig;
use crate::diffmodel::Arch;
use crate::error::{CapoError, Result};
use crate::evalkit::Aggregation;
use crate::io::SCHEMA_VERSION;
use crate::objectives::Objective;
use crate::pairing::Strategy;
use crate::reward::synth::RewardSpec;
use crate::schedule::{NoiseSchedule, ScheduleSpec, WeightingSpec};
use crate::toy::{Benchmark, BenchmarkSpec};
use crate::trainer::{AdamConfig, PretrainConfig, TrainConfig, ValidationConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embed")]
    pub prompt_embed_dim: usize,
    #[serde(default = "default_freqs")]
    pub time_freqs: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_embed() -> usize {
    8
}
fn default_freqs() -> usize {
    8
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            prompt_embed_dim: default_embed(),
            time_freqs: default_freqs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateConfig {
    pub n: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingConfig {
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub objective: Objective,
    pub beta: f64,
    #[serde(default)]
    pub beta_sweep: Vec<f64>,
    pub lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub validation_k: usize,
    pub validation_seed: u64,
    /// Names of the rewards averaged into the validation score.
    #[serde(default)]
    pub validation_rewards: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "default_out")]
    pub out: String,
}

fn default_out() -> String {
    "runs/toy".into()
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: default_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    pub schedule: ScheduleSpec,
    pub weighting: WeightingSpec,
    pub rewards: Vec<RewardSpec>,
    #[serde(default)]
    pub ensemble_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub candidates: CandidateConfig,
    pub pairing: PairingConfig,
    pub finetune: FinetuneSection,
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// The toy benchmark configuration shipped with the crate.
pub const TOY_CONFIG: &str = include_str!("../configs/toy.toml");

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CapoError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CapoError::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn toy() -> Self {
        Self::from_toml(TOY_CONFIG).expect("shipped config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CapoError::ConfigInvalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return Err(CapoError::SchemaVersionMismatch {
                what: "config".into(),
                expected: SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        NoiseSchedule::new(self.schedule.clone())?;
        Benchmark::new(&self.benchmark)?;
        if self.rewards.is_empty() {
            return bad("at least one reward is required".into());
        }
        for (i, r) in self.rewards.iter().enumerate() {
            if self.rewards[..i].iter().any(|o| o.name == r.name) {
                return bad(format!("duplicate reward name `{}`", r.name));
            }
        }
        if let Some(w) = &self.ensemble_weights {
            if w.len() != self.rewards.len() {
                return bad(format!(
                    "{} ensemble weights for {} rewards",
                    w.len(),
                    self.rewards.len()
                ));
            }
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return bad("model.hidden needs at least one non-zero width".into());
        }
        if self.candidates.n < 2 {
            return bad(format!("candidates.n must be >= 2, got {}", self.candidates.n));
        }
        if let Strategy::BestWorst(j) = self.pairing.strategy {
            if j >= self.rewards.len() {
                return bad(format!("best_worst reward index {j} out of range"));
            }
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr >= 0.0) {
            return bad("pretrain needs batch_size >= 1 and lr >= 0".into());
        }
        if self.finetune.beta_sweep.iter().any(|b| !(*b > 0.0)) {
            return bad("beta_sweep values must be positive".into());
        }
        if self.eval.k == 0 || self.candidates.sampler.steps == 0 || self.eval.sampler.steps == 0 {
            return bad("eval.k and sampler steps must be >= 1".into());
        }
        self.validation_reward_indices()?;
        self.train_config(self.finetune.objective, self.pairing.strategy, self.finetune.beta)?
            .validate()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn benchmark(&self) -> Result<Benchmark> {
        Benchmark::new(&self.benchmark)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.clone())
    }

    pub fn arch(&self) -> Arch {
        Arch {
            dim: self.benchmark.dim,
            hidden: self.model.hidden.clone(),
            num_prompts: self.benchmark.num_prompts,
            prompt_embed_dim: self.model.prompt_embed_dim,
            time_freqs: self.model.time_freqs,
        }
    }

    pub fn ensemble_weights(&self) -> Vec<f64> {
        self.ensemble_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.rewards.len() as f64; self.rewards.len()])
    }

    fn validation_reward_indices(&self) -> Result<Option<Vec<usize>>> {
        self.finetune
            .validation_rewards
            .as_ref()
            .map(|names| {
                names
                    .iter()
                    .map(|n| {
                        self.rewards.iter().position(|r| &r.name == n).ok_or_else(|| {
                            CapoError::ConfigInvalid(format!("unknown validation reward `{n}`"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn train_config(&self, objective: Objective, strategy: Strategy, beta: f64) -> Result<TrainConfig> {
        let f = &self.finetune;
        Ok(TrainConfig {
            objective,
            strategy,
            beta,
            weighting: self.weighting,
            lr: f.lr,
            warmup_steps: f.warmup_steps,
            batch_size: f.batch_size,
            max_steps: f.max_steps,
            eval_every: f.eval_every,
            seed: self.seed,
            adam: f.adam,
            validation: ValidationConfig {
                k: f.validation_k,
                seed: f.validation_seed,
                rewards: self.validation_reward_indices()?,
                sampler: self.eval.sampler,
            },
        })
    }

    pub fn pretrain_config(&self) -> &PretrainConfig {
        &self.pretrain
    }
}
