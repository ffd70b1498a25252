//! Reference pretraining, candidate generation and preference fine-tuning.

use std::path::Path;

use log::{debug, info};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmodel::sampler::{sample_many, SamplerConfig};
use crate::diffmodel::{denoise_grad, standard_normal, Arch, Denoiser, NoisedBatch, Reference, Trainable};
use crate::error::{CapoError, Result};
use crate::evalkit::{self, energy_distance, Aggregation, ScoreTable};
use crate::objectives::{self, Objective, PairBatch, PairElement};
use crate::pairing::{sample_pair_with, select_pairs, PairPool, Strategy};
use crate::reward::synth::{score_sample, RewardSpec};
use crate::reward::{calibrate_weighted, CandidateSet, Samples};
use crate::rng::{self, Stage};
use crate::schedule::{NoiseSchedule, WeightingSpec};
use crate::toy::Benchmark;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, num_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            if lr != 0.0 {
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// `lr * step / warmup` during warmup, `lr` afterwards.
pub fn warmup_lr(lr: f64, warmup: usize, step: usize) -> f64 {
    if step < warmup {
        lr * step as f64 / warmup as f64
    } else {
        lr
    }
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    /// Cosine-decay the learning rate to zero after warmup.
    #[serde(default)]
    pub cosine_decay: bool,
    /// Maximum mean energy distance between model and data samples on the
    /// check prompts; `None` skips the check.
    #[serde(default)]
    pub energy_threshold: Option<f64>,
    /// Every `check_stride`-th prompt is used for the convergence check.
    #[serde(default = "default_check_stride")]
    pub check_stride: usize,
    #[serde(default = "default_check_samples")]
    pub check_samples: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_check_stride() -> usize {
    4
}
fn default_check_samples() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
    /// Mean energy distance on the check prompts, when measured.
    pub energy_distance: Option<f64>,
}

/// Fits the reference denoiser to the benchmark's mixtures with the
/// unweighted denoising loss on the network's native output.
pub fn pretrain(
    cfg: &PretrainConfig,
    bench: &Benchmark,
    arch: Arch,
    schedule: NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(Denoiser, PretrainLog)> {
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(CapoError::ConfigInvalid(
            "pretrain needs batch_size >= 1 and lr >= 0".into(),
        ));
    }
    if arch.num_prompts != bench.num_prompts() || arch.dim != bench.dim {
        return Err(CapoError::ArchMismatch(format!(
            "network expects {} prompts in {} dimensions, benchmark has {} in {}",
            arch.num_prompts,
            arch.dim,
            bench.num_prompts(),
            bench.dim
        )));
    }
    let mut net = Trainable::new(Denoiser::init(arch, schedule, seed));
    let mut adam = Adam::new(cfg.adam, net.params().len());
    let mut losses = Vec::with_capacity(cfg.steps);
    let inv_b = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut rng = rng::stream(seed, Stage::Pretrain, step as u64);
        let prompts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..bench.num_prompts()))
            .collect();
        let x0 = prompts
            .iter()
            .map(|&p| bench.prompts[p].sample(&mut rng))
            .collect();
        let batch = NoisedBatch::draw(net.schedule(), x0, prompts, &mut rng, false)?;
        let (loss, grad) = denoise_grad(&net, &batch, &vec![inv_b; cfg.batch_size])?;
        if !loss.is_finite() {
            return Err(CapoError::DivergenceDetected { step, loss });
        }
        let mut lr = warmup_lr(cfg.lr, cfg.warmup_steps, step);
        if cfg.cosine_decay && step >= cfg.warmup_steps {
            let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
            let frac = (step - cfg.warmup_steps) as f64 / span;
            lr *= 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        adam.step(net.params_mut(), &grad, lr);
        losses.push(loss);
        if step % 500 == 0 {
            debug!("pretrain step {step}: loss {loss:.5} lr {lr:.2e}");
        }
    }
    let net = net.into_inner();
    let energy = match cfg.energy_threshold {
        None => None,
        Some(threshold) => {
            let d = check_fit(&net, bench, cfg.check_stride, cfg.check_samples, sampler, seed)?;
            info!("pretrain energy distance {d:.4} (threshold {threshold})");
            if !(d <= threshold) {
                return Err(CapoError::NonConvergence {
                    distance: d,
                    threshold,
                    steps: cfg.steps,
                });
            }
            Some(d)
        }
    };
    Ok((
        net,
        PretrainLog {
            losses,
            energy_distance: energy,
        },
    ))
}

/// Mean energy distance between fresh model samples and fresh data samples
/// over every `stride`-th prompt.
pub fn check_fit(
    net: &Denoiser,
    bench: &Benchmark,
    stride: usize,
    samples: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<f64> {
    let prompts: Vec<usize> = (0..bench.num_prompts()).step_by(stride.max(1)).collect();
    let dists = prompts
        .par_iter()
        .map(|&p| {
            let mut rng = rng::stream(seed, Stage::PretrainCheck, p as u64);
            let data: Vec<Vec<f64>> = (0..samples).map(|_| bench.prompts[p].sample(&mut rng)).collect();
            let noises = (0..samples)
                .map(|_| standard_normal(&mut rng, net.arch().dim))
                .collect();
            let model = sample_many(net, p, noises, sampler)?;
            energy_distance(&model, &data)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

// ---------------------------------------------------------------------------
// Candidates

/// `n` reference samples per prompt, scored under every reward. Each prompt
/// draws from its own `(seed, prompt)` stream.
pub fn generate_candidates(
    reference: &Denoiser,
    bench: &Benchmark,
    prompts: &[usize],
    rewards: &[RewardSpec],
    n: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<CandidateSet>> {
    if n < 2 {
        return Err(CapoError::ConfigInvalid(format!(
            "need at least 2 candidates per prompt for calibration, got {n}"
        )));
    }
    prompts
        .par_iter()
        .map(|&p| {
            let prompt = bench.prompt(p)?;
            let mut rng = rng::stream(seed, Stage::Candidates, p as u64);
            let noises = (0..n)
                .map(|_| standard_normal(&mut rng, reference.arch().dim))
                .collect();
            let samples = sample_many(reference, p, noises, sampler)?;
            let scores = samples
                .iter()
                .map(|s| score_sample(prompt, rewards, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(CandidateSet {
                prompt_id: prompt.id.clone(),
                samples: Samples::Vectors(samples),
                scores,
                reward_names: rewards.iter().map(|r| r.name.clone()).collect(),
                reward_kinds: rewards.iter().map(|r| r.kind).collect(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// A prompt's selected pairs together with the candidate samples they index.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPairs {
    pub prompt: usize,
    pub samples: Vec<Vec<f64>>,
    pub pool: PairPool,
}

impl PromptPairs {
    pub fn new(bench: &Benchmark, pool: PairPool, samples: &Samples) -> Result<Self> {
        let prompt = bench.prompt_index(&pool.prompt_id)?;
        let samples = samples
            .vectors()
            .ok_or_else(|| {
                CapoError::ShapeMismatch(format!(
                    "prompt `{}`: fine-tuning needs sample vectors, not ids",
                    pool.prompt_id
                ))
            })?
            .to_vec();
        if pool.target.len() != samples.len() {
            return Err(CapoError::ShapeMismatch(format!(
                "prompt `{}`: {} ranking values for {} samples",
                pool.prompt_id,
                pool.target.len(),
                samples.len()
            )));
        }
        Ok(Self {
            prompt,
            samples,
            pool,
        })
    }
}

/// Calibrates every candidate set with `weights`, selects pairs with
/// `strategy` and binds them to their samples.
pub fn prepare_pairs(
    bench: &Benchmark,
    sets: &[CandidateSet],
    weights: &[f64],
    strategy: Strategy,
) -> Result<Vec<PromptPairs>> {
    sets.iter()
        .map(|set| {
            let cal = calibrate_weighted(set, weights)?;
            let pool = select_pairs(&set.prompt_id, &cal, strategy)?;
            PromptPairs::new(bench, pool, &set.samples)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    /// Samples per prompt per model.
    pub k: usize,
    pub seed: u64,
    /// Reward indices averaged into the validation score; `None` picks the
    /// strategy's reward for `best_worst` and all rewards otherwise.
    #[serde(default)]
    pub rewards: Option<Vec<usize>>,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub strategy: Strategy,
    pub beta: f64,
    pub weighting: WeightingSpec,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub validation: ValidationConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CapoError::ConfigInvalid(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return bad("batch_size, max_steps and eval_every must be >= 1".into());
        }
        if self.eval_every > self.max_steps {
            return bad(format!(
                "eval_every ({}) exceeds max_steps ({})",
                self.eval_every, self.max_steps
            ));
        }
        if self.validation.k == 0 {
            return bad("validation.k must be >= 1".into());
        }
        Ok(())
    }

    pub fn validation_rewards(&self, num_rewards: usize) -> Vec<usize> {
        match (&self.validation.rewards, self.strategy) {
            (Some(r), _) => r.clone(),
            (None, Strategy::BestWorst(j)) => vec![j],
            (None, _) => (0..num_rewards).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// One per reward.
    pub win_rates: Vec<f64>,
    /// Mean over the validation rewards.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub reward_names: Vec<String>,
    pub validation_rewards: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub chosen_step: usize,
    pub chosen_score: f64,
}

impl RunLog {
    /// One row per step; win-rate columns are filled on evaluation steps.
    pub fn to_csv(&self, comment: Option<&str>) -> Result<String> {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "step".to_string(),
            "lr".into(),
            "loss".into(),
            "mean_margin".into(),
        ];
        header.extend(self.reward_names.iter().map(|n| format!("win_rate_{n}")));
        header.push("validation_score".into());
        w.write_record(&header)?;
        let empty = |n: usize| vec![String::new(); n];
        let l = self.reward_names.len();
        let mut evals = self.evals.iter().peekable();
        // Evaluation at step s reflects the parameters after s updates.
        for rec in std::iter::once(None).chain(self.steps.iter().map(Some)) {
            let step = rec.map_or(0, |r| r.step + 1);
            let mut row = match rec {
                Some(r) => vec![
                    step.to_string(),
                    r.lr.to_string(),
                    r.loss.to_string(),
                    r.mean_margin.to_string(),
                ],
                None => vec![step.to_string(), String::new(), String::new(), String::new()],
            };
            match evals.peek() {
                Some(e) if e.step == step => {
                    row.extend(e.win_rates.iter().map(f64::to_string));
                    row.push(e.score.to_string());
                    evals.next();
                }
                _ => row.extend(empty(l + 1)),
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| CapoError::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is UTF-8"));
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_csv(comment)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutput {
    /// Parameters at the step with the highest validation score.
    pub best: Denoiser,
    pub last: Denoiser,
    pub log: RunLog,
}

/// Validation scorer with the reference samples computed once.
struct Validator<'a> {
    bench: &'a Benchmark,
    rewards: &'a [RewardSpec],
    prompts: Vec<usize>,
    cfg: &'a ValidationConfig,
    base: ScoreTable,
    selected: Vec<usize>,
}

impl<'a> Validator<'a> {
    fn new(
        reference: &Denoiser,
        bench: &'a Benchmark,
        rewards: &'a [RewardSpec],
        cfg: &'a ValidationConfig,
        selected: Vec<usize>,
    ) -> Result<Self> {
        if selected.is_empty() || selected.iter().any(|&j| j >= rewards.len()) {
            return Err(CapoError::ConfigInvalid(format!(
                "validation rewards {selected:?} out of range for {} rewards",
                rewards.len()
            )));
        }
        let prompts: Vec<usize> = (0..bench.num_prompts()).collect();
        let base = evalkit::sample_and_score(
            reference,
            bench,
            &prompts,
            cfg.k,
            rewards,
            &cfg.sampler,
            cfg.seed,
            Stage::Validation,
        )?;
        Ok(Self {
            bench,
            rewards,
            prompts,
            cfg,
            base,
            selected,
        })
    }

    fn evaluate(&self, net: &Denoiser, step: usize) -> Result<EvalRecord> {
        let model = evalkit::sample_and_score(
            net,
            self.bench,
            &self.prompts,
            self.cfg.k,
            self.rewards,
            &self.cfg.sampler,
            self.cfg.seed,
            Stage::Validation,
        )?;
        let report = evalkit::compare_scores(
            &model,
            &self.base,
            self.bench,
            &self.prompts,
            self.rewards,
            self.cfg.k,
            self.cfg.seed,
            Aggregation::PerPrompt,
        )?;
        let win_rates: Vec<f64> = report.rewards.iter().map(|r| r.win_rate).collect();
        let score = self.selected.iter().map(|&j| win_rates[j]).sum::<f64>() / self.selected.len() as f64;
        Ok(EvalRecord {
            step,
            win_rates,
            score,
        })
    }
}

/// Draws one training batch: prompts uniformly, then a pair uniformly from
/// the prompt's pool, one shared time and independent noise per side.
pub fn draw_pair_batch<R: Rng + ?Sized>(
    data: &[PromptPairs],
    schedule: &NoiseSchedule,
    batch_size: usize,
    rng: &mut R,
) -> Result<PairBatch> {
    let mut elements = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let item = &data[rng.random_range(0..data.len())];
        let pair = sample_pair_with(&item.pool, rng)?;
        let t = schedule.draw_preference_time(rng);
        let dim = item.samples[pair.positive].len();
        let eps_pos = standard_normal(rng, dim);
        let eps_neg = standard_normal(rng, dim);
        elements.push(PairElement {
            prompt: item.prompt,
            x_pos: item.samples[pair.positive].clone(),
            x_neg: item.samples[pair.negative].clone(),
            delta_r: Some(pair.delta_r),
            t,
            eps_pos,
            eps_neg,
        });
    }
    Ok(PairBatch { elements })
}

/// Preference fine-tuning from the reference, keeping the parameters with the
/// best validation win-rate against the reference.
pub fn finetune(
    cfg: &TrainConfig,
    reference: &Reference,
    bench: &Benchmark,
    rewards: &[RewardSpec],
    data: &[PromptPairs],
) -> Result<FinetuneOutput> {
    finetune_with(cfg, reference, bench, rewards, data, |_| {})
}

/// [`finetune`] with a hook that may rewrite each drawn batch before the loss
/// is computed (used to force calibrated gaps in equivalence checks).
pub fn finetune_with<F>(
    cfg: &TrainConfig,
    reference: &Reference,
    bench: &Benchmark,
    rewards: &[RewardSpec],
    data: &[PromptPairs],
    mut edit_batch: F,
) -> Result<FinetuneOutput>
where
    F: FnMut(&mut PairBatch),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(CapoError::EmptyPool("<all prompts>".into()));
    }
    let selected = cfg.validation_rewards(rewards.len());
    let validator = Validator::new(reference, bench, rewards, &cfg.validation, selected.clone())?;

    let mut net = Trainable::new((**reference).clone());
    let mut adam = Adam::new(cfg.adam, net.params().len());
    let mut steps = Vec::with_capacity(cfg.max_steps);
    let mut evals = vec![validator.evaluate(&net, 0)?];
    let mut best = (**reference).clone();
    let (mut chosen_step, mut chosen_score) = (0, evals[0].score);

    for step in 0..cfg.max_steps {
        let mut rng = rng::stream(cfg.seed, Stage::FinetuneNoise, step as u64);
        let mut batch = draw_pair_batch(data, net.schedule(), cfg.batch_size, &mut rng)?;
        edit_batch(&mut batch);
        let out = objectives::loss(cfg.objective, &net, reference, &batch, cfg.beta, &cfg.weighting)?;
        if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(CapoError::DivergenceDetected { step, loss: out.loss });
        }
        let lr = warmup_lr(cfg.lr, cfg.warmup_steps, step);
        adam.step(net.params_mut(), &out.grad, lr);
        steps.push(StepRecord {
            step,
            lr,
            loss: out.loss,
            mean_margin: out.mean_margin,
        });
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.max_steps {
            let rec = validator.evaluate(&net, done)?;
            debug!(
                "step {done}: loss {:.5} validation {:.4} {:?}",
                out.loss, rec.score, rec.win_rates
            );
            if rec.score > chosen_score {
                chosen_score = rec.score;
                chosen_step = done;
                best = (*net).clone();
            }
            evals.push(rec);
        }
    }
    info!(
        "{} {} beta={}: chose step {chosen_step} (validation {chosen_score:.4})",
        cfg.objective, cfg.strategy, cfg.beta
    );
    Ok(FinetuneOutput {
        best,
        last: net.into_inner(),
        log: RunLog {
            reward_names: rewards.iter().map(|r| r.name.clone()).collect(),
            validation_rewards: selected,
            steps,
            evals,
            chosen_step,
            chosen_score,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub betas: Vec<f64>,
    pub runs: Vec<FinetuneOutput>,
    /// Index of the run with the highest validation score (earliest on ties).
    pub best: usize,
}

/// Fine-tunes once per `beta` and selects by validation score.
pub fn sweep_beta(
    cfg: &TrainConfig,
    betas: &[f64],
    reference: &Reference,
    bench: &Benchmark,
    rewards: &[RewardSpec],
    data: &[PromptPairs],
) -> Result<SweepResult> {
    if betas.is_empty() {
        return Err(CapoError::ConfigInvalid("beta sweep is empty".into()));
    }
    let mut runs = Vec::with_capacity(betas.len());
    let mut best = 0;
    for (i, &beta) in betas.iter().enumerate() {
        let run = finetune(
            &TrainConfig { beta, ..cfg.clone() },
            reference,
            bench,
            rewards,
            data,
        )?;
        if run.log.chosen_score
            > runs
                .get(best)
                .map_or(f64::NEG_INFINITY, |r: &FinetuneOutput| r.log.chosen_score)
        {
            best = i;
        }
        runs.push(run);
    }
    Ok(SweepResult {
        betas: betas.to_vec(),
        runs,
        best,
    })
}
