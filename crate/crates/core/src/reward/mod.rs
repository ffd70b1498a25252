//! Pairwise win-rates, reward calibration and reward ensembling.
//!
//! A raw reward is turned into a calibrated reward by comparing each
//! candidate against the other `N - 1` candidates generated for the same
//! prompt and averaging the pairwise win probabilities. Every calibrated
//! column therefore averages to exactly one half, and rewards with wildly
//! different ranges end up on a common `(0, 1)` scale.

pub mod synth;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CapoError, Result};
use crate::num::sigmoid;

/// How raw scores of one reward model are turned into pairwise preferences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardKind {
    /// Bradley-Terry logits: `P(i > j) = sigmoid(r_i - r_j)`.
    BtLogit,
    /// Probability-like scores: `P(i > j) = r_i^a / (r_i^a + r_j^a)`.
    PowerRatio {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// Bounded ratings (e.g. 1-10 aesthetics); compared as Bradley-Terry logits.
    BoundedScore,
}

fn default_alpha() -> f64 {
    1.0
}

impl RewardKind {
    pub fn requires_positive(&self) -> bool {
        matches!(self, RewardKind::PowerRatio { .. })
    }
}

/// Probability that a candidate with raw score `r_i` beats one with `r_j`.
///
/// The larger of the two probabilities is computed directly and the smaller
/// one as its complement, so `p(i, j) + p(j, i) == 1` holds exactly and equal
/// scores give exactly `0.5`.
pub fn pairwise_winrate(r_i: f64, r_j: f64, kind: RewardKind) -> Result<f64> {
    let upper = match kind {
        RewardKind::BtLogit | RewardKind::BoundedScore => sigmoid((r_i - r_j).abs()),
        RewardKind::PowerRatio { alpha } => {
            for r in [r_i, r_j] {
                if r.is_nan() || r <= 0.0 {
                    return Err(CapoError::NonPositiveScore(r));
                }
            }
            let (hi, lo) = if r_i >= r_j { (r_i, r_j) } else { (r_j, r_i) };
            1.0 / (1.0 + (lo / hi).powf(alpha))
        }
    };
    Ok(if r_i >= r_j { upper } else { 1.0 - upper })
}

/// Candidate payloads: toy-mode vectors or opaque ids for score tables
/// produced elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Samples {
    Vectors(Vec<Vec<f64>>),
    Ids(Vec<String>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Vectors(v) => v.len(),
            Samples::Ids(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vectors(&self) -> Option<&[Vec<f64>]> {
        match self {
            Samples::Vectors(v) => Some(v),
            Samples::Ids(_) => None,
        }
    }
}

/// `N` candidates for one prompt together with their `N x L` raw score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub prompt_id: String,
    pub samples: Samples,
    /// Row `i` holds the `L` raw rewards of candidate `i`.
    pub scores: Vec<Vec<f64>>,
    pub reward_names: Vec<String>,
    pub reward_kinds: Vec<RewardKind>,
}

impl CandidateSet {
    pub fn num_candidates(&self) -> usize {
        self.scores.len()
    }

    pub fn num_rewards(&self) -> usize {
        self.reward_kinds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let degenerate = |reason: String| CapoError::DegenerateSet {
            prompt_id: self.prompt_id.clone(),
            reason,
        };
        let n = self.scores.len();
        if n < 2 {
            return Err(degenerate(format!("need at least 2 candidates, got {n}")));
        }
        if self.samples.len() != n {
            return Err(CapoError::ShapeMismatch(format!(
                "prompt `{}`: {} samples but {} score rows",
                self.prompt_id,
                self.samples.len(),
                n
            )));
        }
        let l = self.reward_kinds.len();
        if l == 0 || self.reward_names.len() != l {
            return Err(CapoError::ShapeMismatch(format!(
                "prompt `{}`: {} reward names for {} reward kinds",
                self.prompt_id,
                self.reward_names.len(),
                l
            )));
        }
        for row in &self.scores {
            if row.len() != l {
                return Err(CapoError::DimensionMismatch {
                    expected: l,
                    got: row.len(),
                });
            }
            for (&s, kind) in row.iter().zip(&self.reward_kinds) {
                if !s.is_finite() {
                    return Err(degenerate(format!("non-finite score {s}")));
                }
                if kind.requires_positive() && s <= 0.0 {
                    return Err(CapoError::NonPositiveScore(s));
                }
            }
        }
        Ok(())
    }
}

/// Per-reward calibrated scores plus their weighted ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedScores {
    /// `N x L`, entries in `(0, 1)`.
    pub calibrated: Vec<Vec<f64>>,
    /// Length `N`.
    pub ensemble: Vec<f64>,
}

impl CalibratedScores {
    pub fn num_candidates(&self) -> usize {
        self.calibrated.len()
    }

    pub fn num_rewards(&self) -> usize {
        self.calibrated.first().map_or(0, Vec::len)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.calibrated.iter().map(|row| row[j]).collect()
    }
}

/// Calibrates a single raw-score column: entry `i` is the mean win-rate of
/// candidate `i` against every other candidate.
///
/// Each row is summed over opponents in ascending raw-score order. Tied
/// candidates then add identical terms in an identical order, so ties map to
/// bit-identical calibrated values.
pub fn calibrate_column(scores: &[f64], kind: RewardKind) -> Result<Vec<f64>> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for &k in &order {
                if k != i {
                    acc += pairwise_winrate(scores[i], scores[k], kind)?;
                }
            }
            Ok(acc / denom)
        })
        .collect()
}

/// Calibrates every reward column and averages them with uniform weights.
pub fn calibrate(set: &CandidateSet) -> Result<CalibratedScores> {
    let l = set.num_rewards();
    calibrate_weighted(set, &vec![1.0 / l.max(1) as f64; l])
}

/// Calibrates every reward column; the ensemble is the `weights`-weighted sum
/// of calibrated columns (weights are normalised to sum to one).
pub fn calibrate_weighted(set: &CandidateSet, weights: &[f64]) -> Result<CalibratedScores> {
    set.validate()?;
    let (n, l) = (set.num_candidates(), set.num_rewards());
    if weights.len() != l {
        return Err(CapoError::DimensionMismatch {
            expected: l,
            got: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(CapoError::ConfigInvalid(format!(
            "ensemble weights must be non-negative with a positive sum, got {weights:?}"
        )));
    }

    let mut calibrated = vec![vec![0.0; l]; n];
    for (j, &kind) in set.reward_kinds.iter().enumerate() {
        let raw: Vec<f64> = set.scores.iter().map(|row| row[j]).collect();
        for (row, c) in calibrated.iter_mut().zip(calibrate_column(&raw, kind)?) {
            row[j] = c;
        }
    }
    let ensemble = calibrated
        .iter()
        .map(|row| row.iter().zip(weights).map(|(c, w)| c * w).sum::<f64>() / total)
        .collect();
    Ok(CalibratedScores { calibrated, ensemble })
}

/// Calibrates many prompts in parallel. Output order follows input order and
/// each prompt is processed independently, so results do not depend on
/// thread scheduling.
pub fn calibrate_all(sets: &[CandidateSet], weights: &[f64]) -> Result<Vec<CalibratedScores>> {
    sets.par_iter().map(|s| calibrate_weighted(s, weights)).collect()
}

/// Monte Carlo estimate of the expected win-rate of a score against a pool of
/// reference scores.
pub fn expected_winrate_mc(x_score: f64, ref_scores: &[f64], kind: RewardKind) -> Result<f64> {
    if ref_scores.is_empty() {
        return Err(CapoError::EmptyReference);
    }
    let mut sum = 0.0;
    for &r in ref_scores {
        sum += pairwise_winrate(x_score, r, kind)?;
    }
    Ok(sum / ref_scores.len() as f64)
}
