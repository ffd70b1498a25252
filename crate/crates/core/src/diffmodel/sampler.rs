//! Deterministic ODE samplers: Euler in `t` for rectified flow and DDIM for
//! the discrete schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{standard_normal, Denoiser};
use crate::error::{CapoError, Result};
use crate::rng::{self, Stage};
use crate::schedule::{shift_timestep, NoiseSchedule, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Timestep shift; `1.0` leaves the grid uniform.
    #[serde(default = "default_shift")]
    pub shift: f64,
}

fn default_steps() -> usize {
    50
}
fn default_shift() -> f64 {
    1.0
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            shift: default_shift(),
        }
    }
}

/// Times `1 = tau_0 > ... > tau_steps = 0`, shifted.
pub fn time_grid(steps: usize, shift: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(CapoError::ConfigInvalid("sampler needs at least one step".into()));
    }
    (0..=steps)
        .map(|k| shift_timestep(1.0 - k as f64 / steps as f64, shift))
        .collect()
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` down to `t = 0` with explicit Euler.
pub fn euler_flow<F>(x1: Vec<f64>, grid: &[f64], mut velocity: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let mut x = x1;
    for w in grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        let v = velocity(&x, t)?;
        let dt = next - t;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

/// Deterministic DDIM from `x_T` using noise predictions.
pub fn ddim<F>(schedule: &NoiseSchedule, xt: Vec<f64>, grid: &[f64], mut predict_eps: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let mut x = xt;
    for w in grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        let e = predict_eps(&x, t)?;
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let x0: Vec<f64> = x.iter().zip(&e).map(|(x, e)| (x - s * e) / a).collect();
        x = if next <= 0.0 {
            x0
        } else {
            let (a2, s2) = (schedule.alpha(next), schedule.sigma(next));
            x0.iter().zip(&e).map(|(x0, e)| a2 * x0 + s2 * e).collect()
        };
    }
    Ok(x)
}

/// Runs the schedule's sampler from the given starting noise.
pub fn sample_from_noise(
    net: &Denoiser,
    prompt: usize,
    noise: Vec<f64>,
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    let grid = time_grid(cfg.steps, cfg.shift)?;
    match net.schedule().kind() {
        ScheduleKind::RectifiedFlow => euler_flow(noise, &grid, |x, t| net.denoise(x, prompt, t)),
        ScheduleKind::DdpmSqrt => ddim(net.schedule(), noise, &grid, |x, t| net.denoise(x, prompt, t)),
    }
}

/// One sample for `prompt`, fully determined by `seed`.
pub fn sample(net: &Denoiser, prompt: usize, cfg: &SamplerConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng::stream(seed, Stage::Sample, prompt as u64);
    let noise = standard_normal(&mut rng, net.arch().dim);
    sample_from_noise(net, prompt, noise, cfg)
}

/// Samples every starting noise in parallel; output order follows input order.
pub fn sample_many(
    net: &Denoiser,
    prompt: usize,
    noises: Vec<Vec<f64>>,
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<f64>>> {
    noises
        .into_par_iter()
        .map(|z| sample_from_noise(net, prompt, z, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmodel::{Arch, Denoiser};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_euler_step_formula() {
        let net = {
            let mut n = Denoiser::init(Arch::toy(2, 2), NoiseSchedule::rectified_flow(), 1);
            let theta = n.theta.iter_mut();
            let mut k = 0.0f64;
            for w in theta {
                k += 1.0;
                *w += 0.01 * k.sin();
            }
            n
        };
        let x1 = vec![0.3, -0.8];
        let cfg = SamplerConfig { steps: 1, shift: 1.0 };
        let got = sample_from_noise(&net, 1, x1.clone(), &cfg).unwrap();
        let v = net.denoise(&x1, 1, 1.0).unwrap();
        let want: Vec<f64> = x1.iter().zip(&v).map(|(x, v)| x - v * 1.0).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let net = Denoiser::init(Arch::toy(2, 2), NoiseSchedule::ddpm_sqrt(), 1);
        let cfg = SamplerConfig::default();
        assert_eq!(
            sample(&net, 0, &cfg, 5).unwrap(),
            sample(&net, 0, &cfg, 5).unwrap()
        );
        assert_ne!(
            sample(&net, 0, &cfg, 5).unwrap(),
            sample(&net, 0, &cfg, 6).unwrap()
        );
    }

    #[test]
    fn grid_endpoints_and_shift() {
        let g = time_grid(4, 3.0).unwrap();
        assert_eq!((g[0], g[4]), (1.0, 0.0));
        assert_eq!(g[2], 0.75);
        assert!(time_grid(0, 1.0).is_err());
    }

    /// Closed-form optimal velocity `E[eps - x0 | x_t]` for `x0 ~ N(mu, s^2 I)`.
    fn gaussian_velocity(mu: &[f64], s2: f64, x: &[f64], t: f64) -> Vec<f64> {
        let var = (1.0 - t).powi(2) * s2 + t * t;
        x.iter()
            .zip(mu)
            .map(|(&x, &m)| {
                let c = x - (1.0 - t) * m;
                let e_eps = t / var * c;
                let e_x0 = m + (1.0 - t) * s2 / var * c;
                e_eps - e_x0
            })
            .collect()
    }

    #[test]
    fn euler_with_optimal_velocity_recovers_gaussian_moments() {
        let (mu, s2) = ([1.5, -0.5], 0.25f64);
        let grid = time_grid(400, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let z = standard_normal(&mut rng, 2);
            let x = euler_flow(z, &grid, |x, t| Ok(gaussian_velocity(&mu, s2, x, t))).unwrap();
            for i in 0..2 {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        for i in 0..2 {
            let m = sum[i] / n as f64;
            let v = sq[i] / n as f64 - m * m;
            // Standard error of the mean is 0.005; of the variance about 0.0035.
            assert!((m - mu[i]).abs() < 0.02, "mean {m}");
            assert!((v - s2).abs() < 0.05 * s2, "var {v}");
        }
    }

    #[test]
    fn ddim_with_exact_noise_prediction_recovers_point_mass() {
        // For a point mass at x*, the exact noise prediction is (x - alpha x*) / sigma.
        let s = NoiseSchedule::ddpm_sqrt();
        let target = [0.7, -1.1];
        let grid = time_grid(50, 1.0).unwrap();
        let x = ddim(&s, vec![0.2, 0.4], &grid, |x, t| {
            let t = s.clamp(t);
            let (a, sg) = (s.alpha(t), s.sigma(t));
            Ok(x.iter().zip(&target).map(|(x, m)| (x - a * m) / sg).collect())
        })
        .unwrap();
        for (a, b) in x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
