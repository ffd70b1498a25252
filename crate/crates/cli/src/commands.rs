use std::fs;
use std::path::{Path, PathBuf};

use capo::config::RunConfig;
use capo::diffmodel::checkpoint::{self, CheckpointMeta};
use capo::diffmodel::{Denoiser, Reference};
use capo::evalkit::{self, EvalReport};
use capo::io::{self, CalibratedRecord, PairPoolRecord, Stamp};
use capo::objectives::Objective;
use capo::pairing::select_pairs;
use capo::reward::{calibrate_weighted, CandidateSet};
use capo::soup::merge_models;
use capo::trainer::{self, PromptPairs, RunLog};
use capo::{CapoError, Result, Strategy};
use log::info;

use crate::{Cli, Command};

const REFERENCE: &str = "reference.ckpt";
const CANDIDATES: &str = "candidates.jsonl";
const CALIBRATED: &str = "calibrated.jsonl";

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    stamp: Stamp,
    force: bool,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::toy(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.out));
        let stamp = Stamp::new(&cfg.hash());
        Ok(Self {
            cfg,
            out,
            stamp,
            force: cli.force,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn lineage(&self, what: &Path, found: &str) -> Result<()> {
        io::check_lineage(
            &what.display().to_string(),
            found,
            &self.stamp.config_hash,
            self.force,
        )
    }

    fn meta(&self, step: usize) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.cfg.seed,
            step: step as u64,
            config_hash: self.stamp.config_hash.clone(),
        }
    }

    fn load_checkpoint(&self, path: &Path, producer: &'static str) -> Result<Denoiser> {
        if !path.exists() {
            return Err(CapoError::MissingArtifact {
                path: path.to_path_buf(),
                producer,
            });
        }
        let (header, net) = checkpoint::load(path)?;
        self.lineage(path, &header.config_hash)?;
        Ok(net)
    }

    fn reference(&self) -> Result<Denoiser> {
        self.load_checkpoint(&self.path(REFERENCE), "pretrain")
    }

    fn read<T: serde::de::DeserializeOwned>(&self, path: &Path, producer: &'static str) -> Result<Vec<T>> {
        let (stamp, records) = io::read_jsonl(path, producer)?;
        self.lineage(path, &stamp.config_hash)?;
        Ok(records)
    }

    fn pairs_path(&self, strategy: Strategy) -> PathBuf {
        self.path(&format!("pairs_{}.jsonl", strategy.tag()))
    }

    fn run_dir(&self, objective: Objective, strategy: Strategy) -> PathBuf {
        self.path(&format!("{objective}_{}", strategy.tag()))
    }

    fn training_data(&self, strategy: Strategy) -> Result<Vec<PromptPairs>> {
        let bench = self.cfg.benchmark()?;
        let records: Vec<PairPoolRecord> = self.read(&self.pairs_path(strategy), "select-pairs")?;
        records
            .iter()
            .map(|r| PromptPairs::new(&bench, r.pool(), &r.samples))
            .collect()
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    fs::create_dir_all(&ctx.out)?;
    match &cli.command {
        Command::Pretrain => pretrain(&ctx),
        Command::GenCandidates => gen_candidates(&ctx),
        Command::Calibrate { input } => calibrate(&ctx, input.as_deref()),
        Command::SelectPairs { strategy } => select(&ctx, strategy.unwrap_or(ctx.cfg.pairing.strategy)),
        Command::Finetune {
            strategy,
            objective,
            beta,
        } => finetune(
            &ctx,
            strategy.unwrap_or(ctx.cfg.pairing.strategy),
            objective.unwrap_or(ctx.cfg.finetune.objective),
            beta.unwrap_or(ctx.cfg.finetune.beta),
        ),
        Command::SweepBeta { strategy, objective } => sweep(
            &ctx,
            strategy.unwrap_or(ctx.cfg.pairing.strategy),
            objective.unwrap_or(ctx.cfg.finetune.objective),
        ),
        Command::Merge {
            models,
            method,
            output,
        } => merge(&ctx, models, (*method).into(), output.as_deref()),
        Command::Eval { model, name } => eval(&ctx, model, name.as_deref()),
        Command::Report { name } => report(&ctx, name),
    }
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let bench = cfg.benchmark()?;
    let (net, log) = trainer::pretrain(
        cfg.pretrain_config(),
        &bench,
        cfg.arch(),
        cfg.noise_schedule()?,
        &cfg.candidates.sampler,
        cfg.seed,
    )?;
    checkpoint::save(&ctx.path(REFERENCE), &net, &ctx.meta(cfg.pretrain.steps))?;
    let mut csv = format!("# {}\nstep,loss\n", ctx.stamp.comment());
    for (i, l) in log.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(ctx.path("pretrain_log.csv"), csv)?;
    match log.energy_distance {
        Some(d) => info!("wrote {} (energy distance {d:.4})", ctx.path(REFERENCE).display()),
        None => info!("wrote {}", ctx.path(REFERENCE).display()),
    }
    Ok(())
}

fn gen_candidates(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let bench = cfg.benchmark()?;
    let reference = ctx.reference()?;
    let prompts: Vec<usize> = (0..bench.num_prompts()).collect();
    let sets = trainer::generate_candidates(
        &reference,
        &bench,
        &prompts,
        &cfg.rewards,
        cfg.candidates.n,
        &cfg.candidates.sampler,
        cfg.seed,
    )?;
    io::write_jsonl(&ctx.path(CANDIDATES), &ctx.stamp, &sets)?;
    info!("wrote {} candidates for {} prompts", cfg.candidates.n, sets.len());
    Ok(())
}

fn calibrate(ctx: &Ctx, input: Option<&Path>) -> Result<()> {
    let path = input.map_or_else(|| ctx.path(CANDIDATES), Path::to_path_buf);
    let sets: Vec<CandidateSet> = ctx.read(&path, "gen-candidates")?;
    let weights = ctx.cfg.ensemble_weights();
    let records = sets
        .into_iter()
        .map(|set| {
            let cal = calibrate_weighted(&set, &weights)?;
            Ok(CalibratedRecord::new(set, cal))
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_jsonl(&ctx.path(CALIBRATED), &ctx.stamp, &records)?;
    info!("calibrated {} prompts", records.len());
    Ok(())
}

fn select(ctx: &Ctx, strategy: Strategy) -> Result<()> {
    let records: Vec<CalibratedRecord> = ctx.read(&ctx.path(CALIBRATED), "calibrate")?;
    let pools = records
        .into_iter()
        .map(|r| {
            let pool = select_pairs(&r.prompt_id, &r.scores(), strategy)?;
            Ok(PairPoolRecord::new(pool, r.samples))
        })
        .collect::<Result<Vec<_>>>()?;
    let path = ctx.pairs_path(strategy);
    io::write_jsonl(&path, &ctx.stamp, &pools)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_log(ctx: &Ctx, dir: &Path, log: &RunLog) -> Result<()> {
    fs::create_dir_all(dir)?;
    log.write_csv(&dir.join("train_log.csv"), Some(&ctx.stamp.comment()))
}

fn finetune(ctx: &Ctx, strategy: Strategy, objective: Objective, beta: f64) -> Result<()> {
    let cfg = &ctx.cfg;
    let tc = cfg.train_config(objective, strategy, beta)?;
    tc.validate()?;
    let bench = cfg.benchmark()?;
    let reference = Reference::new(ctx.reference()?);
    let data = ctx.training_data(strategy)?;
    let out = trainer::finetune(&tc, &reference, &bench, &cfg.rewards, &data)?;
    let dir = ctx.run_dir(objective, strategy);
    write_log(ctx, &dir, &out.log)?;
    checkpoint::save(&dir.join("model.ckpt"), &out.best, &ctx.meta(out.log.chosen_step))?;
    info!(
        "wrote {} (step {}, validation {:.4})",
        dir.join("model.ckpt").display(),
        out.log.chosen_step,
        out.log.chosen_score
    );
    Ok(())
}

fn sweep(ctx: &Ctx, strategy: Strategy, objective: Objective) -> Result<()> {
    let cfg = &ctx.cfg;
    let tc = cfg.train_config(objective, strategy, cfg.finetune.beta)?;
    tc.validate()?;
    let bench = cfg.benchmark()?;
    let reference = Reference::new(ctx.reference()?);
    let data = ctx.training_data(strategy)?;
    let result = trainer::sweep_beta(
        &tc,
        &cfg.finetune.beta_sweep,
        &reference,
        &bench,
        &cfg.rewards,
        &data,
    )?;
    let dir = ctx.run_dir(objective, strategy);
    let mut table = format!(
        "# {}\nbeta,chosen_step,validation_score,selected\n",
        ctx.stamp.comment()
    );
    for (i, (beta, run)) in result.betas.iter().zip(&result.runs).enumerate() {
        write_log(ctx, &dir.join(format!("beta_{beta}")), &run.log)?;
        table.push_str(&format!(
            "{beta},{},{},{}\n",
            run.log.chosen_step,
            run.log.chosen_score,
            i == result.best
        ));
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("sweep.csv"), table)?;
    let best = &result.runs[result.best];
    checkpoint::save(
        &dir.join("model.ckpt"),
        &best.best,
        &ctx.meta(best.log.chosen_step),
    )?;
    info!(
        "selected beta {} (validation {:.4}); wrote {}",
        result.betas[result.best],
        best.log.chosen_score,
        dir.join("model.ckpt").display()
    );
    Ok(())
}

fn merge(
    ctx: &Ctx,
    models: &[PathBuf],
    method: capo::soup::MergeMethod,
    output: Option<&Path>,
) -> Result<()> {
    let anchor = ctx.reference()?;
    let nets = models
        .iter()
        .map(|p| ctx.load_checkpoint(p, "finetune"))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Denoiser> = nets.iter().collect();
    let merged = merge_models(&anchor, &refs, method)?;
    let path = output.map_or_else(|| ctx.path("merged.ckpt"), Path::to_path_buf);
    checkpoint::save(&path, &merged, &ctx.meta(0))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn report_name(model: &Path) -> String {
    let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    match model
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
    {
        Some(dir) if stem == "model" => dir.to_string(),
        _ => stem.to_string(),
    }
}

fn eval(ctx: &Ctx, model: &Path, name: Option<&str>) -> Result<()> {
    let cfg = &ctx.cfg;
    let bench = cfg.benchmark()?;
    let reference = ctx.reference()?;
    let net = ctx.load_checkpoint(model, "finetune")?;
    let prompts: Vec<usize> = (0..bench.num_prompts()).collect();
    let report = evalkit::evaluate(
        &net,
        &reference,
        &bench,
        &prompts,
        cfg.eval.k,
        &cfg.rewards,
        &cfg.eval.sampler,
        cfg.eval.seed,
        cfg.eval.aggregation,
    )?;
    let name = name.map_or_else(|| report_name(model), str::to_string);
    let path = ctx.path(&format!("eval/{name}/report.jsonl"));
    io::write_jsonl(&path, &ctx.stamp, std::slice::from_ref(&report))?;
    for r in &report.rewards {
        info!("{name}: {} win-rate {:.4}", r.reward, r.win_rate);
    }
    info!("{name}: ensemble win-rate {:.4}", report.ensemble_win_rate);
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn report(ctx: &Ctx, name: &str) -> Result<()> {
    let dir = ctx.path(&format!("eval/{name}"));
    let mut reports: Vec<EvalReport> = ctx.read(&dir.join("report.jsonl"), "eval")?;
    let report = reports.pop().ok_or(CapoError::EmptyScores)?;
    evalkit::emit_report(&report, &dir, Some(&ctx.stamp.comment()))?;
    info!(
        "wrote {} and {}",
        dir.join("report.csv").display(),
        dir.join("winrates.svg").display()
    );
    Ok(())
}
