use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CapoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CapoError {
    #[error("value {value} outside the allowed range [{min}, {max}] for {what}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("timestep shift must be positive and finite, got {0}")]
    InvalidShift(f64),

    #[error("power-ratio reward requires strictly positive scores, got {0}")]
    NonPositiveScore(f64),

    #[error("degenerate candidate set for prompt `{prompt_id}`: {reason}")]
    DegenerateSet { prompt_id: String, reason: String },

    #[error("expected win-rate needs at least one reference score")]
    EmptyReference,

    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("pair pool for prompt `{0}` has no positive/negative pair")]
    EmptyPool(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("CaPO loss needs a calibrated reward gap for every pair (element {0} has none)")]
    MissingDeltaR(usize),

    #[error("pretraining did not converge: energy distance {distance:.4} > threshold {threshold:.4} after {steps} steps")]
    NonConvergence {
        distance: f64,
        threshold: f64,
        steps: usize,
    },

    #[error("non-finite loss {loss} at step {step}")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error("both task vectors are zero; nothing to interpolate")]
    ZeroTaskVectors,

    #[error("win-rate needs at least one score on each side")]
    EmptyScores,

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("missing artifact {path}: run `capo {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("schema version mismatch in {what}: expected {expected}, found {found}")]
    SchemaVersionMismatch { what: String, expected: u32, found: u32 },

    #[error("lineage mismatch: {0} (pass --force to override)")]
    LineageMismatch(String),

    #[error("malformed artifact {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
