//! Preference-pair selection from calibrated scores.
//!
//! Three strategies are provided:
//!
//! * `best_worst(j)`: top-1 against worst-1 under a single calibrated reward.
//! * `sum`: top-1 against worst-1 under the ensemble of calibrated rewards.
//! * `frs`: frontier-based rejection sampling. Positives are the upper Pareto
//!   front of the calibrated reward vectors, negatives the lower front, and
//!   candidates sitting on both fronts are removed from both.
//!
//! Dominance is strict: `a` dominates `b` when it is at least as good on every
//! reward and strictly better on one.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CapoError, Result};
use crate::reward::CalibratedScores;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    BestWorst(usize),
    Sum,
    Frs,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::BestWorst(j) => write!(f, "best_worst:{j}"),
            Strategy::Sum => f.write_str("sum"),
            Strategy::Frs => f.write_str("frs"),
        }
    }
}

impl FromStr for Strategy {
    type Err = CapoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Strategy::Sum),
            "frs" => Ok(Strategy::Frs),
            _ => s
                .strip_prefix("best_worst:")
                .and_then(|j| j.parse().ok())
                .map(Strategy::BestWorst)
                .ok_or_else(|| {
                    CapoError::ConfigInvalid(format!(
                        "unknown strategy `{s}` (expected sum, frs or best_worst:<reward index>)"
                    ))
                }),
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Strategy {
    /// Short tag used in artifact file names.
    pub fn tag(&self) -> String {
        match self {
            Strategy::BestWorst(j) => format!("best{j}"),
            Strategy::Sum => "sum".into(),
            Strategy::Frs => "frs".into(),
        }
    }
}

/// Strict Pareto dominance of `a` over `b` (larger is better).
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CapoError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dominates_unchecked(a, b, Sense::Max))
}

fn dominates_unchecked(a: &[f64], b: &[f64], sense: Sense) -> bool {
    let mut strict = false;
    for (&x, &y) in a.iter().zip(b) {
        let (better, worse) = match sense {
            Sense::Max => (x > y, x < y),
            Sense::Min => (x < y, x > y),
        };
        if worse {
            return false;
        }
        strict |= better;
    }
    strict
}

/// Indices of the non-dominated points (the rank-0 front), ascending.
///
/// Points are visited in lexicographic best-first order; a point can only be
/// dominated by a point visited before it, and if it is dominated at all then
/// it is dominated by a member of the front, so each point is compared
/// against the front found so far only.
pub fn pareto_front(points: &[Vec<f64>], sense: Sense) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let lex = points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal);
        let lex = match sense {
            Sense::Max => lex.reverse(),
            Sense::Min => lex,
        };
        lex.then(a.cmp(&b))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front
            .iter()
            .any(|&f| dominates_unchecked(&points[f], &points[i], sense))
        {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub positive: usize,
    pub negative: usize,
    pub delta_r: f64,
}

/// Positive and negative candidate sets for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPool {
    pub prompt_id: String,
    /// Strategy actually used (after any fallback).
    pub strategy: Strategy,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Calibrated value each candidate is ranked by (ensemble, or a single
    /// reward column for `best_worst`). `delta_r` of a pair is the difference
    /// of these values.
    pub target: Vec<f64>,
}

impl PairPool {
    /// All admissible `(positive, negative)` pairs, i.e. those with `delta_r >= 0`.
    pub fn pairs(&self) -> Vec<PairRecord> {
        let mut out = Vec::with_capacity(self.positives.len() * self.negatives.len());
        for &p in &self.positives {
            for &n in &self.negatives {
                let delta_r = self.target[p] - self.target[n];
                if delta_r >= 0.0 {
                    out.push(PairRecord {
                        positive: p,
                        negative: n,
                        delta_r,
                    });
                }
            }
        }
        out
    }
}

fn argmax_argmin(values: &[f64]) -> (usize, usize) {
    let mut best = 0;
    let mut worst = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
        if v < values[worst] {
            worst = i;
        }
    }
    (best, worst)
}

fn top_bottom_pool(prompt_id: &str, strategy: Strategy, target: Vec<f64>) -> Result<PairPool> {
    let (best, worst) = argmax_argmin(&target);
    if target[best] == target[worst] {
        return Err(CapoError::DegenerateSet {
            prompt_id: prompt_id.to_string(),
            reason: format!("all candidates tie under strategy {strategy}"),
        });
    }
    Ok(PairPool {
        prompt_id: prompt_id.to_string(),
        strategy,
        positives: vec![best],
        negatives: vec![worst],
        target,
    })
}

/// Selects the positive and negative sets for one prompt.
pub fn select_pairs(prompt_id: &str, cal: &CalibratedScores, strategy: Strategy) -> Result<PairPool> {
    let n = cal.num_candidates();
    let l = cal.num_rewards();
    if n < 2 {
        return Err(CapoError::DegenerateSet {
            prompt_id: prompt_id.to_string(),
            reason: format!("need at least 2 candidates, got {n}"),
        });
    }
    if cal.calibrated.iter().all(|row| *row == cal.calibrated[0]) {
        return Err(CapoError::DegenerateSet {
            prompt_id: prompt_id.to_string(),
            reason: "all calibrated rows are identical".into(),
        });
    }
    match strategy {
        Strategy::BestWorst(j) => {
            if j >= l {
                return Err(CapoError::DimensionMismatch {
                    expected: l,
                    got: j + 1,
                });
            }
            top_bottom_pool(prompt_id, strategy, cal.column(j))
        }
        Strategy::Sum => top_bottom_pool(prompt_id, strategy, cal.ensemble.clone()),
        Strategy::Frs if l < 2 => select_pairs(prompt_id, cal, Strategy::BestWorst(0)),
        Strategy::Frs => {
            // One representative (lowest index) per distinct calibrated row.
            let mut reps: Vec<usize> = Vec::new();
            for i in 0..n {
                if !reps.iter().any(|&r| cal.calibrated[r] == cal.calibrated[i]) {
                    reps.push(i);
                }
            }
            let points: Vec<Vec<f64>> = reps.iter().map(|&r| cal.calibrated[r].clone()).collect();
            let upper: Vec<usize> = pareto_front(&points, Sense::Max)
                .into_iter()
                .map(|k| reps[k])
                .collect();
            let lower: Vec<usize> = pareto_front(&points, Sense::Min)
                .into_iter()
                .map(|k| reps[k])
                .collect();
            let positives: Vec<usize> = upper.iter().copied().filter(|i| !lower.contains(i)).collect();
            let negatives: Vec<usize> = lower.iter().copied().filter(|i| !upper.contains(i)).collect();
            let pool = PairPool {
                prompt_id: prompt_id.to_string(),
                strategy,
                positives,
                negatives,
                target: cal.ensemble.clone(),
            };
            if pool.positives.is_empty() || pool.negatives.is_empty() || pool.pairs().is_empty() {
                debug!("{prompt_id}: frontier selection left no usable pair, falling back to sum");
                return select_pairs(prompt_id, cal, Strategy::Sum);
            }
            Ok(pool)
        }
    }
}

/// Draws one admissible pair uniformly, deterministically in `(seed, counter)`.
pub fn sample_pair(pool: &PairPool, seed: u64, counter: u64) -> Result<PairRecord> {
    let mut rng = rng::stream(seed, rng::Stage::PairDraw, counter);
    sample_pair_with(pool, &mut rng)
}

pub fn sample_pair_with<R: Rng + ?Sized>(pool: &PairPool, rng: &mut R) -> Result<PairRecord> {
    let pairs = pool.pairs();
    if pairs.is_empty() {
        return Err(CapoError::EmptyPool(pool.prompt_id.clone()));
    }
    Ok(pairs[rng.random_range(0..pairs.len())])
}
