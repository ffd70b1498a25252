//! DPO, IPO and CaPO preference losses on top of the implicit reward.
//!
//! With `u = beta (r+ - r-)` and `r` the implicit reward of each side of a
//! pair, the per-pair losses are
//!
//! * DPO: `-log sigmoid(u)`
//! * IPO: `(1 - u)^2`
//! * CaPO: `(delta_r - u)^2`, with `delta_r` the calibrated reward gap.
//!
//! Both sides of a pair share one diffusion time and use independent noise.
//! The batch loss is the mean of the per-pair losses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffmodel::{denoise_grad, NoisedBatch, Reference, Trainable};
use crate::error::{CapoError, Result};
use crate::num::{log_sigmoid, sigmoid};
use crate::schedule::{NoiseSchedule, WeightingSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Dpo,
    Ipo,
    Capo,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Dpo => "dpo",
            Objective::Ipo => "ipo",
            Objective::Capo => "capo",
        })
    }
}

impl FromStr for Objective {
    type Err = CapoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(Objective::Dpo),
            "ipo" => Ok(Objective::Ipo),
            "capo" => Ok(Objective::Capo),
            _ => Err(CapoError::ConfigInvalid(format!(
                "unknown objective `{s}` (expected dpo, ipo or capo)"
            ))),
        }
    }
}

/// One preference pair with its noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PairElement {
    pub prompt: usize,
    pub x_pos: Vec<f64>,
    pub x_neg: Vec<f64>,
    pub delta_r: Option<f64>,
    pub t: f64,
    pub eps_pos: Vec<f64>,
    pub eps_neg: Vec<f64>,
}

impl PairElement {
    /// The same pair with winner and loser exchanged (noise follows its sample).
    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt,
            x_pos: self.x_neg.clone(),
            x_neg: self.x_pos.clone(),
            delta_r: self.delta_r.map(|d| -d),
            t: self.t,
            eps_pos: self.eps_neg.clone(),
            eps_neg: self.eps_pos.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairBatch {
    pub elements: Vec<PairElement>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Noised batch holding all positives followed by all negatives.
    pub fn noised(&self, schedule: &NoiseSchedule) -> Result<NoisedBatch> {
        let e = &self.elements;
        let x0 = e
            .iter()
            .map(|p| p.x_pos.clone())
            .chain(e.iter().map(|p| p.x_neg.clone()))
            .collect();
        let eps = e
            .iter()
            .map(|p| p.eps_pos.clone())
            .chain(e.iter().map(|p| p.eps_neg.clone()))
            .collect();
        let t = e.iter().chain(e).map(|p| p.t).collect();
        let prompts = e.iter().chain(e).map(|p| p.prompt).collect();
        NoisedBatch::new(schedule, x0, eps, t, prompts)
    }

    pub fn with_delta_r(&self, delta_r: f64) -> Self {
        Self {
            elements: self
                .elements
                .iter()
                .map(|p| PairElement {
                    delta_r: Some(delta_r),
                    ..p.clone()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Mean of `u = beta (r+ - r-)` over the batch.
    pub mean_margin: f64,
}

/// Per-pair implicit rewards `(r+, r-)`.
pub fn implicit_rewards(
    theta: &Trainable,
    reference: &Reference,
    batch: &PairBatch,
    weighting: &WeightingSpec,
) -> Result<Vec<(f64, f64)>> {
    theta.check_compatible(reference)?;
    let nb = batch.noised(theta.schedule())?;
    let a = theta.squared_errors(&nb)?;
    let b = reference.squared_errors(&nb)?;
    let n = batch.len();
    Ok(batch
        .elements
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = theta.schedule().native_coefficient(weighting, p.t);
            (c * (a[i] - b[i]), c * (a[n + i] - b[n + i]))
        })
        .collect())
}

/// Shared driver: `per_pair(u, i)` returns the loss of pair `i` and its derivative in `u`.
fn preference_loss<G>(
    theta: &Trainable,
    reference: &Reference,
    batch: &PairBatch,
    beta: f64,
    weighting: &WeightingSpec,
    per_pair: G,
) -> Result<LossOutput>
where
    G: Fn(f64, usize) -> (f64, f64),
{
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(CapoError::ConfigInvalid(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if batch.is_empty() {
        return Err(CapoError::ShapeMismatch("empty pair batch".into()));
    }
    theta.check_compatible(reference)?;
    let schedule = theta.schedule();
    let nb = batch.noised(schedule)?;
    let a = theta.squared_errors(&nb)?;
    let b = reference.squared_errors(&nb)?;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut upstream = vec![0.0; 2 * n];
    let mut loss = 0.0;
    let mut margin = 0.0;
    for (i, p) in batch.elements.iter().enumerate() {
        let c = schedule.native_coefficient(weighting, p.t);
        let r_pos = c * (a[i] - b[i]);
        let r_neg = c * (a[n + i] - b[n + i]);
        let u = beta * (r_pos - r_neg);
        let (l, dl) = per_pair(u, i);
        loss += l;
        margin += u;
        upstream[i] = dl * beta * c * inv_n;
        upstream[n + i] = -dl * beta * c * inv_n;
    }
    let (_, grad) = denoise_grad(theta, &nb, &upstream)?;
    Ok(LossOutput {
        loss: loss * inv_n,
        grad,
        mean_margin: margin * inv_n,
    })
}

pub fn dpo_loss(
    theta: &Trainable,
    reference: &Reference,
    batch: &PairBatch,
    beta: f64,
    weighting: &WeightingSpec,
) -> Result<LossOutput> {
    preference_loss(theta, reference, batch, beta, weighting, |u, _| {
        (-log_sigmoid(u), -sigmoid(-u))
    })
}

fn regression_loss(
    theta: &Trainable,
    reference: &Reference,
    batch: &PairBatch,
    beta: f64,
    weighting: &WeightingSpec,
    targets: &[f64],
) -> Result<LossOutput> {
    preference_loss(theta, reference, batch, beta, weighting, |u, i| {
        let r = targets[i] - u;
        (r * r, -2.0 * r)
    })
}

/// IPO: CaPO with every calibrated gap set to one.
pub fn ipo_loss(
    theta: &Trainable,
    reference: &Reference,
    batch: &PairBatch,
    beta: f64,
    weighting: &WeightingSpec,
) -> Result<LossOutput> {
    regression_loss(theta, reference, batch, beta, weighting, &vec![1.0; batch.len()])
}

pub fn capo_loss(
    theta: &Trainable,
    reference: &Reference,
    batch: &PairBatch,
    beta: f64,
    weighting: &WeightingSpec,
) -> Result<LossOutput> {
    let targets = batch
        .elements
        .iter()
        .enumerate()
        .map(|(i, p)| p.delta_r.ok_or(CapoError::MissingDeltaR(i)))
        .collect::<Result<Vec<f64>>>()?;
    regression_loss(theta, reference, batch, beta, weighting, &targets)
}

pub fn loss(
    objective: Objective,
    theta: &Trainable,
    reference: &Reference,
    batch: &PairBatch,
    beta: f64,
    weighting: &WeightingSpec,
) -> Result<LossOutput> {
    match objective {
        Objective::Dpo => dpo_loss(theta, reference, batch, beta, weighting),
        Objective::Ipo => ipo_loss(theta, reference, batch, beta, weighting),
        Objective::Capo => capo_loss(theta, reference, batch, beta, weighting),
    }
}
