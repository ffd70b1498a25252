//! The desk-scale conditional benchmark: a small vocabulary of prompts, each
//! owning a Gaussian mixture, a target mode and a preferred direction.
//!
//! Mixture components sit on a circle in the first two coordinates. The
//! target mode is component 0; the preferred direction points between the
//! components opposite the target, so a "distance to target" reward and a
//! "projection on direction" reward pull in different directions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CapoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_num_prompts")]
    pub num_prompts: usize,
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_std")]
    pub component_std: f64,
    /// Angle of the preferred direction relative to the target mode, in turns.
    #[serde(default = "default_direction_offset")]
    pub direction_offset: f64,
}

fn default_dim() -> usize {
    2
}
fn default_num_prompts() -> usize {
    32
}
fn default_components() -> usize {
    4
}
fn default_radius() -> f64 {
    2.0
}
fn default_std() -> f64 {
    0.35
}
fn default_direction_offset() -> f64 {
    0.375
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            dim: default_dim(),
            num_prompts: default_num_prompts(),
            components: default_components(),
            radius: default_radius(),
            component_std: default_std(),
            direction_offset: default_direction_offset(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub id: String,
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
    pub target: Vec<f64>,
    /// Unit vector.
    pub direction: Vec<f64>,
}

impl PromptSpec {
    /// Draws one sample from this prompt's mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let c = &self.centers[rng.random_range(0..self.centers.len())];
        c.iter()
            .map(|m| m + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub dim: usize,
    pub prompts: Vec<PromptSpec>,
}

pub fn prompt_id(index: usize) -> String {
    format!("p{index:03}")
}

impl Benchmark {
    pub fn new(spec: &BenchmarkSpec) -> Result<Self> {
        if spec.dim < 2 {
            return Err(CapoError::ConfigInvalid("benchmark dim must be >= 2".into()));
        }
        if spec.num_prompts == 0 || spec.components == 0 {
            return Err(CapoError::ConfigInvalid(
                "benchmark needs at least one prompt and one component".into(),
            ));
        }
        if !(spec.component_std > 0.0 && spec.radius > 0.0) {
            return Err(CapoError::ConfigInvalid(
                "benchmark radius and component_std must be positive".into(),
            ));
        }
        let tau = std::f64::consts::TAU;
        let embed = |angle: f64, scale: f64| {
            let mut v = vec![0.0; spec.dim];
            v[0] = scale * angle.cos();
            v[1] = scale * angle.sin();
            v
        };
        let prompts = (0..spec.num_prompts)
            .map(|c| {
                let base = tau * c as f64 / spec.num_prompts as f64;
                let centers: Vec<Vec<f64>> = (0..spec.components)
                    .map(|k| embed(base + tau * k as f64 / spec.components as f64, spec.radius))
                    .collect();
                PromptSpec {
                    id: prompt_id(c),
                    target: centers[0].clone(),
                    centers,
                    std: spec.component_std,
                    direction: embed(base + tau * spec.direction_offset, 1.0),
                }
            })
            .collect();
        Ok(Self {
            dim: spec.dim,
            prompts,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompt_index(&self, id: &str) -> Result<usize> {
        self.prompts
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| CapoError::UnknownPrompt(id.to_string()))
    }

    pub fn prompt(&self, index: usize) -> Result<&PromptSpec> {
        self.prompts
            .get(index)
            .ok_or_else(|| CapoError::UnknownPrompt(prompt_id(index)))
    }

    pub fn prompt_by_id(&self, id: &str) -> Result<&PromptSpec> {
        self.prompt_index(id).map(|i| &self.prompts[i])
    }
}
