//! Toy conditional denoiser, forward noising, samplers and the implicit reward.
//!
//! The network sees `(x_t, sinusoidal embedding of the log-SNR, prompt
//! embedding)`. Under `ddpm_sqrt` it predicts the noise; under
//! `rectified_flow` it predicts the velocity `v = eps - x0`, and
//! `eps_hat = x_t + (1 - t) v_hat` converts between the two heads.

pub mod checkpoint;
mod mlp;
pub mod sampler;

use std::ops::Deref;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub use mlp::Arch;
use mlp::Workspace;

use crate::error::{CapoError, Result};
use crate::rng::{self, Stage};
use crate::schedule::{NoiseSchedule, ScheduleKind, WeightingSpec};
use crate::toy::prompt_id;

/// Samples per parallel work item. Partial gradients are reduced in chunk
/// order, so results do not depend on the number of threads.
const CHUNK: usize = 16;

/// Network parameters together with the architecture and schedule they were
/// trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: Arch,
    schedule: NoiseSchedule,
    theta: Vec<f64>,
}

impl Denoiser {
    /// Random hidden layers and embeddings, zero output layer.
    pub fn init(arch: Arch, schedule: NoiseSchedule, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stage::Init, 0);
        let mut theta = vec![0.0; arch.num_params()];
        let layers = arch.layers();
        let last = layers.len() - 1;
        for layer in &layers[..last] {
            let std = 1.0 / (layer.fan_in as f64).sqrt();
            for w in &mut theta[layer.w..layer.b] {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for e in &mut theta[arch.embedding_offset()..] {
            *e = rng.sample::<f64, _>(StandardNormal);
        }
        Self {
            arch,
            schedule,
            theta,
        }
    }

    pub fn from_parts(arch: Arch, schedule: NoiseSchedule, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != arch.num_params() {
            return Err(CapoError::ShapeMismatch(format!(
                "architecture needs {} parameters, got {}",
                arch.num_params(),
                theta.len()
            )));
        }
        if arch.hidden.is_empty() || arch.dim == 0 || arch.num_prompts == 0 {
            return Err(CapoError::ShapeMismatch(
                "architecture needs a hidden layer, a non-empty output and at least one prompt".into(),
            ));
        }
        Ok(Self {
            arch,
            schedule,
            theta,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_params(self) -> Vec<f64> {
        self.theta
    }

    /// Same architecture and schedule.
    pub fn check_compatible(&self, other: &Denoiser) -> Result<()> {
        if self.arch != other.arch {
            return Err(CapoError::ArchMismatch(format!(
                "{:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        if self.schedule.spec() != other.schedule.spec() {
            return Err(CapoError::ArchMismatch(format!(
                "schedule {:?} vs {:?}",
                self.schedule.kind(),
                other.schedule.kind()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, xt: &[f64], prompt: usize) -> Result<()> {
        if prompt >= self.arch.num_prompts {
            return Err(CapoError::UnknownPrompt(prompt_id(prompt)));
        }
        if xt.len() != self.arch.dim {
            return Err(CapoError::ShapeMismatch(format!(
                "sample has dimension {}, network expects {}",
                xt.len(),
                self.arch.dim
            )));
        }
        Ok(())
    }

    fn conditioning(&self, t: f64) -> f64 {
        self.schedule.log_snr_unchecked(self.schedule.clamp(t))
    }

    /// Raw network output at time `t` (clamped into the schedule range):
    /// noise under `ddpm_sqrt`, velocity under `rectified_flow`.
    pub fn denoise(&self, xt: &[f64], prompt: usize, t: f64) -> Result<Vec<f64>> {
        self.check_inputs(xt, prompt)?;
        let mut ws = Workspace::new(&self.arch);
        ws.forward(&self.theta, xt, prompt, self.conditioning(t));
        Ok(ws.out)
    }

    /// Noise prediction, converting from the velocity head when needed.
    pub fn predict_eps(&self, xt: &[f64], prompt: usize, t: f64) -> Result<Vec<f64>> {
        let out = self.denoise(xt, prompt, t)?;
        Ok(match self.schedule.kind() {
            ScheduleKind::DdpmSqrt => out,
            ScheduleKind::RectifiedFlow => eps_from_velocity(xt, &out, t),
        })
    }

    /// Network outputs for every element of a batch.
    pub fn denoise_batch(&self, batch: &NoisedBatch) -> Result<Vec<Vec<f64>>> {
        batch.check(self)?;
        Ok(batch
            .xt
            .par_chunks(CHUNK)
            .enumerate()
            .flat_map_iter(|(c, xs)| {
                let mut ws = Workspace::new(&self.arch);
                xs.iter()
                    .enumerate()
                    .map(|(k, x)| {
                        let b = c * CHUNK + k;
                        ws.forward(&self.theta, x, batch.prompts[b], self.conditioning(batch.t[b]));
                        ws.out.clone()
                    })
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    /// Squared error `||f(x_t) - target||^2` of every element against its native target.
    pub fn squared_errors(&self, batch: &NoisedBatch) -> Result<Vec<f64>> {
        let out = self.denoise_batch(batch)?;
        Ok(out
            .iter()
            .zip(&batch.target)
            .map(|(o, y)| crate::num::squared_distance(o, y))
            .collect())
    }
}

/// `eps_hat = x_t + (1 - t) v_hat` under rectified flow.
pub fn eps_from_velocity(xt: &[f64], v: &[f64], t: f64) -> Vec<f64> {
    xt.iter().zip(v).map(|(x, v)| x + (1.0 - t) * v).collect()
}

/// `v_hat = (eps_hat - x_t) / (1 - t)` under rectified flow.
pub fn velocity_from_eps(xt: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
    xt.iter().zip(eps).map(|(x, e)| (e - x) / (1.0 - t)).collect()
}

/// A model whose parameters are being optimized. Only this type exposes
/// gradients and mutable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable(Denoiser);

impl Trainable {
    pub fn new(net: Denoiser) -> Self {
        Self(net)
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.0.theta
    }

    pub fn into_inner(self) -> Denoiser {
        self.0
    }
}

impl Deref for Trainable {
    type Target = Denoiser;
    fn deref(&self) -> &Denoiser {
        &self.0
    }
}

/// A frozen model. There is no way to mutate it or request its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference(Denoiser);

impl Reference {
    pub fn new(net: Denoiser) -> Self {
        Self(net)
    }
}

impl Deref for Reference {
    type Target = Denoiser;
    fn deref(&self) -> &Denoiser {
        &self.0
    }
}

/// Clean samples, noise draws and times, plus the noised points
/// `x_t = alpha_t x0 + sigma_t eps` and the network's regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch {
    pub x0: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub prompts: Vec<usize>,
    pub xt: Vec<Vec<f64>>,
    /// `eps` for noise prediction, `eps - x0` for velocity prediction.
    pub target: Vec<Vec<f64>>,
}

impl NoisedBatch {
    pub fn new(
        schedule: &NoiseSchedule,
        x0: Vec<Vec<f64>>,
        eps: Vec<Vec<f64>>,
        t: Vec<f64>,
        prompts: Vec<usize>,
    ) -> Result<Self> {
        let b = x0.len();
        if eps.len() != b || t.len() != b || prompts.len() != b {
            return Err(CapoError::ShapeMismatch(format!(
                "batch fields disagree: x0 {b}, eps {}, t {}, prompts {}",
                eps.len(),
                t.len(),
                prompts.len()
            )));
        }
        for (x, e) in x0.iter().zip(&eps) {
            if x.len() != e.len() {
                return Err(CapoError::ShapeMismatch(format!(
                    "x0 has dimension {}, eps {}",
                    x.len(),
                    e.len()
                )));
            }
        }
        let xt = x0
            .iter()
            .zip(&eps)
            .zip(&t)
            .map(|((x, e), &t)| noise(schedule, x, e, t))
            .collect();
        let target = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| native_target(schedule, x, e))
            .collect();
        Ok(Self {
            x0,
            eps,
            t,
            prompts,
            xt,
            target,
        })
    }

    /// Draws times from `draw_time` and standard normal noise for each clean sample.
    pub fn draw<R: Rng + ?Sized>(
        schedule: &NoiseSchedule,
        x0: Vec<Vec<f64>>,
        prompts: Vec<usize>,
        rng: &mut R,
        preference_times: bool,
    ) -> Result<Self> {
        let mut eps = Vec::with_capacity(x0.len());
        let mut t = Vec::with_capacity(x0.len());
        for x in &x0 {
            t.push(if preference_times {
                schedule.draw_preference_time(rng)
            } else {
                schedule.draw_pretrain_time(rng)
            });
            eps.push(standard_normal(rng, x.len()));
        }
        Self::new(schedule, x0, eps, t, prompts)
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    fn check(&self, net: &Denoiser) -> Result<()> {
        for (x, &p) in self.xt.iter().zip(&self.prompts) {
            net.check_inputs(x, p)?;
        }
        Ok(())
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Forward noising `alpha_t x0 + sigma_t eps`.
pub fn noise(schedule: &NoiseSchedule, x0: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// Recovers the noise from `(x_t, x0)` by inverting the noising map.
pub fn recover_eps(schedule: &NoiseSchedule, xt: &[f64], x0: &[f64], t: f64) -> Vec<f64> {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    xt.iter().zip(x0).map(|(x, z)| (x - a * z) / s).collect()
}

fn native_target(schedule: &NoiseSchedule, x0: &[f64], eps: &[f64]) -> Vec<f64> {
    match schedule.kind() {
        ScheduleKind::DdpmSqrt => eps.to_vec(),
        ScheduleKind::RectifiedFlow => eps.iter().zip(x0).map(|(e, x)| e - x).collect(),
    }
}

/// Value and gradient of `sum_b upstream_b ||f(x_t[b]) - target[b]||^2`.
pub fn denoise_grad(net: &Trainable, batch: &NoisedBatch, upstream: &[f64]) -> Result<(f64, Vec<f64>)> {
    if upstream.len() != batch.len() {
        return Err(CapoError::ShapeMismatch(format!(
            "{} upstream weights for a batch of {}",
            upstream.len(),
            batch.len()
        )));
    }
    batch.check(net)?;
    let p = net.theta.len();
    let partials: Vec<(f64, Vec<f64>)> = (0..batch.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut ws = Workspace::new(&net.arch);
            let mut grad = vec![0.0; p];
            let mut value = 0.0;
            let mut g_out = vec![0.0; net.arch.dim];
            for &b in idx {
                let u = upstream[b];
                if u == 0.0 {
                    continue;
                }
                ws.forward(
                    &net.theta,
                    &batch.xt[b],
                    batch.prompts[b],
                    net.conditioning(batch.t[b]),
                );
                let mut sq = 0.0;
                for ((g, &o), &y) in g_out.iter_mut().zip(&ws.out).zip(&batch.target[b]) {
                    let r = o - y;
                    sq += r * r;
                    *g = 2.0 * u * r;
                }
                value += u * sq;
                ws.backward(&net.theta, batch.prompts[b], &g_out, &mut grad);
            }
            (value, grad)
        })
        .collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; p];
    for (v, g) in partials {
        value += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((value, grad))
}

/// Implicit reward `c(t) (||f_theta - y||^2 - ||f_ref - y||^2)` evaluated on
/// the network's native output, where `y` is the native target implied by
/// `(x_t, eps, t)` and `c(t)` is the weighting coefficient for that head.
pub fn implicit_reward(
    theta: &Denoiser,
    reference: &Denoiser,
    xt: &[f64],
    eps: &[f64],
    prompt: usize,
    t: f64,
    weighting: &WeightingSpec,
) -> Result<f64> {
    theta.check_compatible(reference)?;
    let schedule = theta.schedule();
    let target = match schedule.kind() {
        ScheduleKind::DdpmSqrt => eps.to_vec(),
        ScheduleKind::RectifiedFlow => {
            // eps - x0 with x0 = (x_t - t eps) / (1 - t)
            xt.iter().zip(eps).map(|(x, e)| (e - x) / (1.0 - t)).collect()
        }
    };
    let a = crate::num::squared_distance(&theta.denoise(xt, prompt, t)?, &target);
    let b = crate::num::squared_distance(&reference.denoise(xt, prompt, t)?, &target);
    Ok(schedule.native_coefficient(weighting, t) * (a - b))
}

/// The same implicit reward evaluated through noise predictions:
/// `w_t lambda'_t (||eps_theta - eps||^2 - ||eps_ref - eps||^2)`.
pub fn implicit_reward_eps(
    theta: &Denoiser,
    reference: &Denoiser,
    xt: &[f64],
    eps: &[f64],
    prompt: usize,
    t: f64,
    weighting: &WeightingSpec,
) -> Result<f64> {
    theta.check_compatible(reference)?;
    let a = crate::num::squared_distance(&theta.predict_eps(xt, prompt, t)?, eps);
    let b = crate::num::squared_distance(&reference.predict_eps(xt, prompt, t)?, eps);
    Ok(theta.schedule().eps_coefficient(weighting, t) * (a - b))
}
