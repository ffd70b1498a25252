//! Noise schedules, log-SNR algebra, timestep shifting and loss weighting.
//!
//! Two schedule families are supported:
//!
//! * `rectified_flow`: `alpha(t) = 1 - t`, `sigma(t) = t`, so the log-SNR is
//!   `lambda(t) = 2 log((1 - t) / t)` with the analytic derivative
//!   `lambda'(t) = -2 / (t (1 - t))`. The network predicts velocity.
//! * `ddpm_sqrt`: the "scaled linear" discrete DDPM schedule where
//!   `sqrt(beta_i)` is linear in the step index and
//!   `alpha_bar_i = prod_{s <= i} (1 - beta_s)`. Continuous time maps onto the
//!   step grid via `t * (T - 1)`, and the log-SNR is linearly interpolated
//!   between grid points. `lambda'(t)` is treated as the constant `-1`.
//!   The network predicts noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CapoError, Result};
use crate::num::sigmoid;

pub const DEFAULT_T_MIN: f64 = 1e-4;
pub const DEFAULT_T_MAX: f64 = 1.0 - 1e-4;

/// Log-SNR range used when drawing preference-training times for rectified flow.
pub const FLOW_LAMBDA_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    DdpmSqrt,
    RectifiedFlow,
}

/// Serializable description of a schedule, as it appears in config files and
/// checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_beta_0")]
    pub beta_0: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_num_steps")]
    pub num_discrete_steps: usize,
}

fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}
fn default_t_max() -> f64 {
    DEFAULT_T_MAX
}
fn default_beta_0() -> f64 {
    0.00085
}
fn default_beta_end() -> f64 {
    0.012
}
fn default_num_steps() -> usize {
    1000
}

impl ScheduleSpec {
    pub fn rectified_flow() -> Self {
        Self {
            kind: ScheduleKind::RectifiedFlow,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
            beta_0: default_beta_0(),
            beta_end: default_beta_end(),
            num_discrete_steps: default_num_steps(),
        }
    }

    /// The scaled-linear DDPM schedule with SDXL's betas (0.00085 .. 0.012, 1000 steps).
    pub fn ddpm_sqrt() -> Self {
        Self {
            kind: ScheduleKind::DdpmSqrt,
            ..Self::rectified_flow()
        }
    }
}

/// A built schedule. For `ddpm_sqrt` this holds the precomputed log-SNR on the
/// discrete step grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    grid_log_snr: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        if !(spec.t_min > 0.0 && spec.t_min < spec.t_max && spec.t_max < 1.0) {
            return Err(CapoError::ConfigInvalid(format!(
                "schedule needs 0 < t_min < t_max < 1, got t_min={} t_max={}",
                spec.t_min, spec.t_max
            )));
        }
        let grid_log_snr = match spec.kind {
            ScheduleKind::RectifiedFlow => Vec::new(),
            ScheduleKind::DdpmSqrt => {
                if spec.num_discrete_steps < 2 {
                    return Err(CapoError::ConfigInvalid(
                        "ddpm_sqrt needs at least 2 discrete steps".into(),
                    ));
                }
                if !(spec.beta_0 > 0.0 && spec.beta_end < 1.0 && spec.beta_0 <= spec.beta_end) {
                    return Err(CapoError::ConfigInvalid(format!(
                        "ddpm_sqrt needs 0 < beta_0 <= beta_end < 1, got {} and {}",
                        spec.beta_0, spec.beta_end
                    )));
                }
                ddpm_grid_log_snr(spec.beta_0, spec.beta_end, spec.num_discrete_steps)
            }
        };
        Ok(Self { spec, grid_log_snr })
    }

    pub fn rectified_flow() -> Self {
        Self::new(ScheduleSpec::rectified_flow()).expect("default schedule is valid")
    }

    pub fn ddpm_sqrt() -> Self {
        Self::new(ScheduleSpec::ddpm_sqrt()).expect("default schedule is valid")
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn kind(&self) -> ScheduleKind {
        self.spec.kind
    }

    pub fn t_min(&self) -> f64 {
        self.spec.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.spec.t_max
    }

    /// Clamps `t` into `[t_min, t_max]`.
    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.spec.t_min, self.spec.t_max)
    }

    fn check_range(&self, t: f64) -> Result<()> {
        if t >= self.spec.t_min && t <= self.spec.t_max {
            Ok(())
        } else {
            Err(CapoError::OutOfRange {
                what: "diffusion time",
                value: t,
                min: self.spec.t_min,
                max: self.spec.t_max,
            })
        }
    }

    /// Log signal-to-noise ratio `log(alpha(t)^2 / sigma(t)^2)`.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        self.check_range(t)?;
        Ok(self.log_snr_unchecked(t))
    }

    pub(crate) fn log_snr_unchecked(&self, t: f64) -> f64 {
        match self.spec.kind {
            ScheduleKind::RectifiedFlow => 2.0 * ((1.0 - t) / t).ln(),
            ScheduleKind::DdpmSqrt => {
                let last = self.grid_log_snr.len() - 1;
                let pos = t * last as f64;
                let lo = (pos.floor() as usize).min(last - 1);
                let frac = pos - lo as f64;
                let (a, b) = (self.grid_log_snr[lo], self.grid_log_snr[lo + 1]);
                if frac == 0.0 {
                    a
                } else {
                    a + frac * (b - a)
                }
            }
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.spec.kind {
            ScheduleKind::RectifiedFlow => 1.0 - t,
            ScheduleKind::DdpmSqrt => sigmoid(self.log_snr_unchecked(self.clamp(t))).sqrt(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.spec.kind {
            ScheduleKind::RectifiedFlow => t,
            ScheduleKind::DdpmSqrt => sigmoid(-self.log_snr_unchecked(self.clamp(t))).sqrt(),
        }
    }

    /// `d lambda / d t`; constant `-1` for `ddpm_sqrt`.
    pub fn lambda_prime(&self, t: f64) -> f64 {
        match self.spec.kind {
            ScheduleKind::RectifiedFlow => -2.0 / (t * (1.0 - t)),
            ScheduleKind::DdpmSqrt => -1.0,
        }
    }

    /// Inverse of the rectified-flow log-SNR map: `t = 1 / (1 + e^{lambda/2})`.
    pub fn flow_time_from_log_snr(lambda: f64) -> f64 {
        sigmoid(-0.5 * lambda)
    }

    /// Draws a time for the denoising (pretraining) loss: `t ~ U(t_min, t_max)`.
    pub fn draw_pretrain_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.spec.t_min..self.spec.t_max)
    }

    /// Draws a time for preference training. Rectified flow samples the
    /// log-SNR uniformly on [-10, 10]; the discrete schedule samples `t`
    /// uniformly.
    pub fn draw_preference_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.spec.kind {
            ScheduleKind::RectifiedFlow => {
                let lambda = rng.random_range(FLOW_LAMBDA_RANGE.0..FLOW_LAMBDA_RANGE.1);
                self.clamp(Self::flow_time_from_log_snr(lambda))
            }
            ScheduleKind::DdpmSqrt => self.draw_pretrain_time(rng),
        }
    }

    /// The per-time coefficient `w_t * lambda'_t` multiplying the difference
    /// of squared noise-prediction errors in the implicit reward.
    pub fn eps_coefficient(&self, weighting: &WeightingSpec, t: f64) -> f64 {
        match weighting.kind {
            WeightingKind::Constant => -1.0,
            WeightingKind::Sigmoid => {
                let lambda = self.log_snr_unchecked(t);
                loss_weight(weighting, lambda) * self.lambda_prime(t)
            }
        }
    }

    /// The same coefficient expressed against the network's native output.
    ///
    /// For noise prediction this equals [`Self::eps_coefficient`]. For
    /// velocity prediction `eps_hat - eps = (1 - t) (v_hat - v)`, so the
    /// coefficient picks up `(1 - t)^2`; the sigmoid case is evaluated through
    /// the flow weight, which stays finite at both ends of the time range.
    pub fn native_coefficient(&self, weighting: &WeightingSpec, t: f64) -> f64 {
        match (self.spec.kind, weighting.kind) {
            (ScheduleKind::DdpmSqrt, _) => self.eps_coefficient(weighting, t),
            (ScheduleKind::RectifiedFlow, WeightingKind::Constant) => -(1.0 - t) * (1.0 - t),
            (ScheduleKind::RectifiedFlow, WeightingKind::Sigmoid) => {
                let lambda = self.log_snr_unchecked(t);
                -flow_conversion_factor(weighting.bias) * flow_weight(weighting.bias, lambda)
            }
        }
    }
}

/// Log-SNR at every step of the scaled-linear DDPM grid, computed from the
/// running sum of `ln(1 - beta_s)`.
fn ddpm_grid_log_snr(beta_0: f64, beta_end: f64, steps: usize) -> Vec<f64> {
    let (s0, s1) = (beta_0.sqrt(), beta_end.sqrt());
    let denom = (steps - 1) as f64;
    let mut log_alpha_bar = 0.0;
    (0..steps)
        .map(|i| {
            let root = s0 + (i as f64 / denom) * (s1 - s0);
            log_alpha_bar += (-root * root).ln_1p();
            // log(abar / (1 - abar))
            log_alpha_bar - (-log_alpha_bar.exp_m1()).ln()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    Constant,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingSpec {
    pub kind: WeightingKind,
    #[serde(default)]
    pub bias: f64,
}

impl WeightingSpec {
    pub fn constant() -> Self {
        Self {
            kind: WeightingKind::Constant,
            bias: 0.0,
        }
    }

    pub fn sigmoid(bias: f64) -> Self {
        Self {
            kind: WeightingKind::Sigmoid,
            bias,
        }
    }
}

/// Loss weight as a function of log-SNR: `1` for constant, `sigmoid(b - lambda)` for sigmoid.
pub fn loss_weight(spec: &WeightingSpec, lambda: f64) -> f64 {
    match spec.kind {
        WeightingKind::Constant => 1.0,
        WeightingKind::Sigmoid => sigmoid(spec.bias - lambda),
    }
}

/// Weight applied to the flow-matching loss that corresponds to sigmoid
/// weighting of the noise-prediction loss: `1 / (e^{(l-b)/2} + e^{-(l-b)/2})`.
pub fn flow_weight(bias: f64, lambda: f64) -> f64 {
    let u = 0.5 * (lambda - bias).abs();
    // 1 / (e^u + e^-u) = e^-u / (1 + e^-2u)
    let e = (-u).exp();
    e / (1.0 + e * e)
}

/// Constant relating the sigmoid-weighted noise loss (measured per unit time)
/// to the flow-weighted velocity loss under rectified flow:
/// `sigmoid(b - l) |l'| ||eps_hat - eps||^2 = 2 e^{b/2} flow_weight(b, l) ||v_hat - v||^2`.
pub fn flow_conversion_factor(bias: f64) -> f64 {
    2.0 * (0.5 * bias).exp()
}

/// Timestep shift `t -> t s / (1 + t (s - 1))`.
pub fn shift_timestep(t: f64, shift: f64) -> Result<f64> {
    if !(shift > 0.0 && shift.is_finite()) {
        return Err(CapoError::InvalidShift(shift));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CapoError::OutOfRange {
            what: "timestep",
            value: t,
            min: 0.0,
            max: 1.0,
        });
    }
    if shift == 1.0 {
        return Ok(t);
    }
    let ts = t * shift;
    Ok(ts / (ts + (1.0 - t)))
}
