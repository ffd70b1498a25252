//! Model soup: spherical interpolation of task vectors around a shared anchor.

use serde::{Deserialize, Serialize};

use crate::diffmodel::Denoiser;
use crate::error::{CapoError, Result};
use crate::num::dot;

/// Below this `sin(omega)` the two task vectors are treated as collinear.
const COLLINEAR_SIN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Slerp,
    Lerp,
}

/// `theta0 + (1 - lam) tau1 + lam tau2` with `tau_k = theta_k - theta0`.
pub fn lerp(theta0: &[f64], theta1: &[f64], theta2: &[f64], lam: f64) -> Result<Vec<f64>> {
    check_lengths(theta0, theta1, theta2)?;
    Ok(theta0
        .iter()
        .zip(theta1)
        .zip(theta2)
        .map(|((&a, &b), &c)| a + (1.0 - lam) * (b - a) + lam * (c - a))
        .collect())
}

/// Spherical interpolation of the task vectors `theta1 - theta0` and
/// `theta2 - theta0`, using one angle over the whole flattened vector.
///
/// Falls back to [`lerp`] when the angle is degenerate or one task vector is
/// zero. Returns the input itself when `lam` is exactly 0 or 1, or when both
/// inputs are bit-identical.
pub fn slerp2(theta0: &[f64], theta1: &[f64], theta2: &[f64], lam: f64) -> Result<Vec<f64>> {
    check_lengths(theta0, theta1, theta2)?;
    if !(0.0..=1.0).contains(&lam) {
        return Err(CapoError::OutOfRange {
            what: "interpolation coefficient",
            value: lam,
            min: 0.0,
            max: 1.0,
        });
    }
    let tau1: Vec<f64> = theta1.iter().zip(theta0).map(|(a, b)| a - b).collect();
    let tau2: Vec<f64> = theta2.iter().zip(theta0).map(|(a, b)| a - b).collect();
    let (n1, n2) = (dot(&tau1, &tau1).sqrt(), dot(&tau2, &tau2).sqrt());
    if n1 == 0.0 && n2 == 0.0 {
        return Err(CapoError::ZeroTaskVectors);
    }
    if lam == 0.0 || theta1 == theta2 {
        return Ok(theta1.to_vec());
    }
    if lam == 1.0 {
        return Ok(theta2.to_vec());
    }
    if n1 == 0.0 || n2 == 0.0 {
        return lerp(theta0, theta1, theta2, lam);
    }
    let cos = (dot(&tau1, &tau2) / (n1 * n2)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let sin = omega.sin();
    if sin < COLLINEAR_SIN {
        return lerp(theta0, theta1, theta2, lam);
    }
    let c1 = ((1.0 - lam) * omega).sin() / sin;
    let c2 = (lam * omega).sin() / sin;
    Ok(theta0
        .iter()
        .zip(tau1.iter().zip(&tau2))
        .map(|(&a, (&t1, &t2))| a + c1 * t1 + c2 * t2)
        .collect())
}

/// Two-stage uniform soup of three models: merge the first two at `1/2`,
/// then merge the result with the third at `1/3`.
pub fn merge3(theta0: &[f64], t1: &[f64], t2: &[f64], t3: &[f64], method: MergeMethod) -> Result<Vec<f64>> {
    let merge = |a: &[f64], b: &[f64], lam: f64| match method {
        MergeMethod::Slerp => slerp2(theta0, a, b, lam),
        MergeMethod::Lerp => lerp(theta0, a, b, lam),
    };
    let t12 = merge(t1, t2, 0.5)?;
    merge(&t12, t3, 1.0 / 3.0)
}

/// Merges two or three checkpoints around `anchor`.
pub fn merge_models(anchor: &Denoiser, inputs: &[&Denoiser], method: MergeMethod) -> Result<Denoiser> {
    for m in inputs {
        anchor.check_compatible(m)?;
    }
    let p0 = anchor.params();
    let theta = match inputs {
        [a, b] => match method {
            MergeMethod::Slerp => slerp2(p0, a.params(), b.params(), 0.5)?,
            MergeMethod::Lerp => lerp(p0, a.params(), b.params(), 0.5)?,
        },
        [a, b, c] => merge3(p0, a.params(), b.params(), c.params(), method)?,
        _ => {
            return Err(CapoError::ConfigInvalid(format!(
                "merge needs 2 or 3 models, got {}",
                inputs.len()
            )))
        }
    };
    Denoiser::from_parts(anchor.arch().clone(), anchor.schedule().clone(), theta)
}

fn check_lengths(a: &[f64], b: &[f64], c: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.len() != c.len() {
        return Err(CapoError::ArchMismatch(format!(
            "parameter counts {}, {}, {}",
            a.len(),
            b.len(),
            c.len()
        )));
    }
    Ok(())
}
