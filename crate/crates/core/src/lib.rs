//! Calibrated multi-reward preference optimization for small diffusion models.
//!
//! The crate covers the whole pipeline at desk scale: noise schedules and
//! loss weighting, reward calibration through pairwise win-rates, Pareto
//! pair selection, a toy conditional denoiser with hand-written gradients,
//! DPO/IPO/CaPO objectives, training, SLERP model merging and win-rate
//! evaluation.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod config;
pub mod diffmodel;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod num;
pub mod objectives;
pub mod pairing;
pub mod reward;
pub mod rng;
pub mod schedule;
pub mod soup;
pub mod toy;
pub mod trainer;

pub use error::{CapoError, Result};
pub use pairing::{PairPool, PairRecord, Sense, Strategy};
pub use reward::synth::{RewardSpec, SynthReward};
pub use reward::{CalibratedScores, CandidateSet, RewardKind, Samples};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec, WeightingKind, WeightingSpec};
pub use toy::{Benchmark, BenchmarkSpec};
