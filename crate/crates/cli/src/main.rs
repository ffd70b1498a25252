//! `capo`: the calibrated preference optimization pipeline on the toy benchmark.
//!
//! Each subcommand reads its upstream artifacts from the output directory and
//! writes its own next to them:
//!
//! | subcommand       | reads                                  | writes                                 |
//! |------------------|----------------------------------------|----------------------------------------|
//! | `pretrain`       |                                        | `reference.ckpt`, `pretrain_log.csv`   |
//! | `gen-candidates` | `reference.ckpt`                       | `candidates.jsonl`                     |
//! | `calibrate`      | `candidates.jsonl`                     | `calibrated.jsonl`                     |
//! | `select-pairs`   | `calibrated.jsonl`                     | `pairs_<strategy>.jsonl`               |
//! | `finetune`       | `reference.ckpt`, `pairs_<strategy>`   | `<objective>_<strategy>/model.ckpt`    |
//! | `sweep-beta`     | `reference.ckpt`, `pairs_<strategy>`   | `<objective>_<strategy>/model.ckpt`    |
//! | `merge`          | `reference.ckpt`, 2 or 3 checkpoints   | `merged.ckpt`                          |
//! | `eval`           | `reference.ckpt`, a checkpoint         | `eval/<name>/report.jsonl`             |
//! | `report`         | `eval/<name>/report.jsonl`             | `eval/<name>/report.csv`, `winrates.svg` |

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use capo::objectives::Objective;
use capo::soup::MergeMethod;
use capo::{CapoError, Strategy};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "capo",
    version,
    about = "Calibrated preference optimization on a toy diffusion benchmark"
)]
pub struct Cli {
    /// Run configuration (TOML). Defaults to the shipped toy config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory. Defaults to `paths.out` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Accept upstream artifacts produced under a different config.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the reference denoiser to the benchmark.
    Pretrain,
    /// Draw N reference samples per prompt and score them.
    GenCandidates,
    /// Calibrate candidate scores into win-rate estimates.
    Calibrate {
        /// Candidate file to read instead of `<out>/candidates.jsonl`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Select positive and negative sets per prompt.
    SelectPairs {
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Preference fine-tuning at one beta.
    Finetune {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Fine-tune once per beta in `finetune.beta_sweep` and keep the best.
    SweepBeta {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        objective: Option<Objective>,
    },
    /// Merge fine-tuned checkpoints around the reference.
    Merge {
        /// A checkpoint to merge; pass two or three times.
        #[arg(long = "model", required = true, action = clap::ArgAction::Append)]
        models: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Slerp)]
        method: MethodArg,
        /// Output path; defaults to `<out>/merged.ckpt`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare a checkpoint against the reference.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Report name; defaults to the checkpoint's directory or file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Render `report.csv` and `winrates.svg` for an evaluation.
    Report {
        #[arg(long)]
        name: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Slerp,
    Lerp,
}

impl From<MethodArg> for MergeMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Slerp => MergeMethod::Slerp,
            MethodArg::Lerp => MergeMethod::Lerp,
        }
    }
}

fn exit_code(err: &CapoError) -> u8 {
    match err {
        CapoError::ConfigInvalid(_)
        | CapoError::SchemaVersionMismatch { .. }
        | CapoError::LineageMismatch(_) => 2,
        CapoError::MissingArtifact { .. } => 3,
        CapoError::DivergenceDetected { .. } | CapoError::NonConvergence { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAPO_LOG", "info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
