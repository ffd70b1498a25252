//! Analytic stand-ins for learned reward models on the toy benchmark.

use serde::{Deserialize, Serialize};

use super::RewardKind;
use crate::error::{CapoError, Result};
use crate::num::{dot, sigmoid, squared_distance};
use crate::toy::{Benchmark, PromptSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthReward {
    /// `-scale * ||x - target||`; maximal (zero) at the prompt's target mode.
    TargetDistance { scale: f64 },
    /// `scale * <x, u>` for the prompt's preferred unit direction `u`.
    Direction { scale: f64 },
    /// `exp(scale * <x, u>)`: a strictly positive score for power-ratio rewards.
    DirectionExp { scale: f64 },
    /// `-scale * ||x||^2`.
    NormPenalty { scale: f64 },
    /// `1 + 9 sigmoid(scale * <x, u>)`: a rating on the 1..10 scale.
    DirectionRating { scale: f64 },
}

impl SynthReward {
    pub fn score(&self, prompt: &PromptSpec, x: &[f64]) -> f64 {
        match *self {
            SynthReward::TargetDistance { scale } => -scale * squared_distance(x, &prompt.target).sqrt(),
            SynthReward::Direction { scale } => scale * dot(x, &prompt.direction),
            SynthReward::DirectionExp { scale } => (scale * dot(x, &prompt.direction)).exp(),
            SynthReward::NormPenalty { scale } => -scale * dot(x, x),
            SynthReward::DirectionRating { scale } => 1.0 + 9.0 * sigmoid(scale * dot(x, &prompt.direction)),
        }
    }
}

/// A named reward: how to score a sample and how to compare two scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub name: String,
    pub kind: RewardKind,
    pub synth: SynthReward,
}

/// Scores one sample under every configured reward.
pub fn synth_rewards(
    bench: &Benchmark,
    rewards: &[RewardSpec],
    sample: &[f64],
    prompt_id: &str,
) -> Result<Vec<f64>> {
    let prompt = bench.prompt_by_id(prompt_id)?;
    score_sample(prompt, rewards, sample)
}

pub(crate) fn score_sample(prompt: &PromptSpec, rewards: &[RewardSpec], sample: &[f64]) -> Result<Vec<f64>> {
    if sample.len() != prompt.target.len() {
        return Err(CapoError::DimensionMismatch {
            expected: prompt.target.len(),
            got: sample.len(),
        });
    }
    Ok(rewards.iter().map(|r| r.synth.score(prompt, sample)).collect())
}

/// The two-reward conflicting pair shipped with the toy benchmark: closeness
/// to the prompt's target mode versus projection on its preferred direction.
pub fn conflicting_pair() -> Vec<RewardSpec> {
    vec![
        RewardSpec {
            name: "target".into(),
            kind: RewardKind::BtLogit,
            synth: SynthReward::TargetDistance { scale: 1.0 },
        },
        RewardSpec {
            name: "direction".into(),
            kind: RewardKind::BtLogit,
            synth: SynthReward::Direction { scale: 1.0 },
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::BenchmarkSpec;

    fn bench() -> Benchmark {
        Benchmark::new(&BenchmarkSpec::default()).unwrap()
    }

    #[test]
    fn target_reward_is_maximal_at_target() {
        let b = bench();
        let rewards = conflicting_pair();
        let p = &b.prompts[5];
        let at = synth_rewards(&b, &rewards, &p.target, &p.id).unwrap();
        assert_eq!(at[0], 0.0);
        let off: Vec<f64> = p.target.iter().map(|v| v + 0.1).collect();
        assert!(synth_rewards(&b, &rewards, &off, &p.id).unwrap()[0] < 0.0);
    }

    #[test]
    fn direction_reward_zero_at_origin() {
        let b = bench();
        let s = synth_rewards(&b, &conflicting_pair(), &[0.0, 0.0], "p000").unwrap();
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn unknown_prompt_and_bad_dimension() {
        let b = bench();
        assert!(matches!(
            synth_rewards(&b, &conflicting_pair(), &[0.0, 0.0], "zzz"),
            Err(CapoError::UnknownPrompt(_))
        ));
        assert!(synth_rewards(&b, &conflicting_pair(), &[0.0], "p000").is_err());
    }

    fn fd_grad(r: &SynthReward, p: &PromptSpec, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (r.score(p, &a) - r.score(p, &b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn shipped_rewards_conflict_at_probe_point() {
        let b = bench();
        let rewards = conflicting_pair();
        for p in &b.prompts {
            // Probe at the component a quarter turn away from the target.
            let probe = &p.centers[1];
            let g0 = fd_grad(&rewards[0].synth, p, probe);
            let g1 = fd_grad(&rewards[1].synth, p, probe);
            assert!(dot(&g0, &g1) < 0.0, "{}: no conflict", p.id);
        }
    }

    #[test]
    fn positive_and_bounded_variants() {
        let b = bench();
        let p = &b.prompts[0];
        for x in [[3.0, -1.0], [-4.0, 2.0], [0.0, 0.0]] {
            assert!(SynthReward::DirectionExp { scale: 1.0 }.score(p, &x) > 0.0);
            let r = SynthReward::DirectionRating { scale: 1.0 }.score(p, &x);
            assert!((1.0..=10.0).contains(&r));
            assert!(SynthReward::NormPenalty { scale: 1.0 }.score(p, &x) <= 0.0);
        }
    }
}
