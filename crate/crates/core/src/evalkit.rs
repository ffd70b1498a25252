//! Win-rate evaluation (K x K protocol), score reporting and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmodel::sampler::{sample_many, SamplerConfig};
use crate::diffmodel::{standard_normal, Denoiser};
use crate::error::{CapoError, Result};
use crate::num::complementary_share;
use crate::reward::synth::{score_sample, RewardSpec};
use crate::rng::{self, Stage};
use crate::toy::Benchmark;

/// Wins of `model` over `base` over all ordered comparisons, in half-win units
/// (a win counts 2, a tie 1), and the number of comparisons.
pub fn half_wins(model: &[f64], base: &[f64]) -> Result<(u64, u64)> {
    if model.is_empty() || base.is_empty() {
        return Err(CapoError::EmptyScores);
    }
    let mut sorted = base.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut halves = 0u64;
    for &m in model {
        let below = sorted.partition_point(|&b| b < m) as u64;
        let not_above = sorted.partition_point(|&b| b <= m) as u64;
        halves += 2 * below + (not_above - below);
    }
    Ok((halves, (model.len() * base.len()) as u64))
}

/// Fraction of the `|model| x |base|` ordered comparisons that `model` wins,
/// ties counting one half. `winrate(a, b) + winrate(b, a) == 1` exactly.
pub fn winrate(model: &[f64], base: &[f64]) -> Result<f64> {
    let (h, n) = half_wins(model, base)?;
    Ok(complementary_share(h, 2 * n))
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` between two samples
/// (V-statistic form: every expectation averages over all ordered pairs).
pub fn energy_distance(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(CapoError::EmptyScores);
    }
    let mean_dist = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += crate::num::squared_distance(x, y).sqrt();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    Ok(2.0 * mean_dist(xs, ys) - mean_dist(xs, xs) - mean_dist(ys, ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over prompts of per-prompt win-rates.
    #[default]
    PerPrompt,
    /// All comparisons of all prompts pooled together.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardResult {
    pub reward: String,
    pub win_rate: f64,
    pub mean_score: f64,
    pub base_mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub prompt_id: String,
    /// One win-rate per reward.
    pub win_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub rewards: Vec<RewardResult>,
    /// Mean of the per-reward win-rates.
    pub ensemble_win_rate: f64,
    pub prompts: Vec<PromptResult>,
}

impl EvalReport {
    pub fn win_rate(&self, reward: &str) -> Option<f64> {
        self.rewards
            .iter()
            .find(|r| r.reward == reward)
            .map(|r| r.win_rate)
    }
}

/// Scores of `K` samples per prompt: `[prompt][reward][k]`.
pub type ScoreTable = Vec<Vec<Vec<f64>>>;

/// Draws `k` samples per prompt from `net` with starting noise taken from
/// `(seed, stage, prompt)` streams and scores them under every reward.
pub fn sample_and_score(
    net: &Denoiser,
    bench: &Benchmark,
    prompts: &[usize],
    k: usize,
    rewards: &[RewardSpec],
    sampler: &SamplerConfig,
    seed: u64,
    stage: Stage,
) -> Result<ScoreTable> {
    if k == 0 {
        return Err(CapoError::EmptyScores);
    }
    prompts
        .par_iter()
        .map(|&p| {
            let mut rng = rng::stream(seed, stage, p as u64);
            let noises = (0..k)
                .map(|_| standard_normal(&mut rng, net.arch().dim))
                .collect();
            let samples = sample_many(net, p, noises, sampler)?;
            let prompt = bench.prompt(p)?;
            let mut table = vec![Vec::with_capacity(k); rewards.len()];
            for s in &samples {
                for (col, v) in table.iter_mut().zip(score_sample(prompt, rewards, s)?) {
                    col.push(v);
                }
            }
            Ok(table)
        })
        .collect()
}

/// Builds a report from already-scored samples of both models.
pub fn compare_scores(
    model: &ScoreTable,
    base: &ScoreTable,
    bench: &Benchmark,
    prompts: &[usize],
    rewards: &[RewardSpec],
    k: usize,
    seed: u64,
    aggregation: Aggregation,
) -> Result<EvalReport> {
    if prompts.is_empty() || rewards.is_empty() {
        return Err(CapoError::EmptyScores);
    }
    let l = rewards.len();
    let mut per_prompt = Vec::with_capacity(prompts.len());
    let mut pooled = vec![(0u64, 0u64); l];
    for (pi, &p) in prompts.iter().enumerate() {
        let mut rates = Vec::with_capacity(l);
        for j in 0..l {
            let (h, n) = half_wins(&model[pi][j], &base[pi][j])?;
            pooled[j].0 += h;
            pooled[j].1 += n;
            rates.push(complementary_share(h, 2 * n));
        }
        per_prompt.push(PromptResult {
            prompt_id: bench.prompt(p)?.id.clone(),
            win_rates: rates,
        });
    }
    let mean = |table: &ScoreTable, j: usize| {
        let (s, n) = table
            .iter()
            .flat_map(|row| &row[j])
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        s / n as f64
    };
    let results: Vec<RewardResult> = rewards
        .iter()
        .enumerate()
        .map(|(j, r)| RewardResult {
            reward: r.name.clone(),
            win_rate: match aggregation {
                Aggregation::PerPrompt => {
                    per_prompt.iter().map(|p| p.win_rates[j]).sum::<f64>() / prompts.len() as f64
                }
                Aggregation::Pooled => complementary_share(pooled[j].0, 2 * pooled[j].1),
            },
            mean_score: mean(model, j),
            base_mean_score: mean(base, j),
        })
        .collect();
    let ensemble_win_rate = results.iter().map(|r| r.win_rate).sum::<f64>() / l as f64;
    Ok(EvalReport {
        k,
        seed,
        aggregation,
        rewards: results,
        ensemble_win_rate,
        prompts: per_prompt,
    })
}

/// Samples `k` outputs per prompt from both models with shared starting
/// noise and compares them under every reward.
pub fn evaluate(
    model: &Denoiser,
    base: &Denoiser,
    bench: &Benchmark,
    prompts: &[usize],
    k: usize,
    rewards: &[RewardSpec],
    sampler: &SamplerConfig,
    seed: u64,
    aggregation: Aggregation,
) -> Result<EvalReport> {
    model.check_compatible(base)?;
    if prompts.is_empty() || rewards.is_empty() {
        return Err(CapoError::EmptyScores);
    }
    let m = sample_and_score(model, bench, prompts, k, rewards, sampler, seed, Stage::Eval)?;
    let b = sample_and_score(base, bench, prompts, k, rewards, sampler, seed, Stage::Eval)?;
    compare_scores(&m, &b, bench, prompts, rewards, k, seed, aggregation)
}

/// Renders `report.csv`. The optional lineage line is written as a `#` comment.
pub fn render_csv(report: &EvalReport, lineage: Option<&str>) -> Result<String> {
    let mut out = String::new();
    if let Some(l) = lineage {
        writeln!(out, "# {l}").expect("write to string");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["reward", "win_rate", "mean_score"])?;
    for r in &report.rewards {
        w.write_record([r.reward.clone(), r.win_rate.to_string(), r.mean_score.to_string()])?;
    }
    w.write_record([
        "ensemble".to_string(),
        report.ensemble_win_rate.to_string(),
        String::new(),
    ])?;
    let bytes = w.into_inner().map_err(|e| CapoError::Io(e.into_error()))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is UTF-8"));
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders `winrates.svg`: one bar per reward plus the ensemble, with a
/// dashed line at 0.5.
pub fn render_svg(report: &EvalReport, lineage: Option<&str>) -> String {
    let bars: Vec<(&str, f64)> = report
        .rewards
        .iter()
        .map(|r| (r.reward.as_str(), r.win_rate))
        .chain(std::iter::once(("ensemble", report.ensemble_win_rate)))
        .collect();
    let (bar_w, gap, left, top, plot_h) = (60.0, 30.0, 50.0, 20.0, 200.0);
    let width = left + bars.len() as f64 * (bar_w + gap) + gap;
    let height = top + plot_h + 50.0;
    let y = |v: f64| top + plot_h * (1.0 - v);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    if let Some(l) = lineage {
        let _ = writeln!(s, "<!-- {} -->", xml_escape(l).replace("--", "- -"));
    }
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end" font-family="sans-serif">{tick:.2}</text>"#,
            left - 6.0,
            y(tick) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + plot_h
    );
    for (i, (name, v)) in bars.iter().enumerate() {
        let x = left + gap + i as f64 * (bar_w + gap);
        let v = v.clamp(0.0, 1.0);
        let fill = if *name == "ensemble" { "#d95f02" } else { "#1b9e77" };
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{:.3}" width="{bar_w}" height="{:.3}" fill="{fill}"/>"#,
            y(v),
            plot_h * v
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.3}" font-size="11" text-anchor="middle" font-family="sans-serif">{v:.3}</text>"#,
            x + bar_w / 2.0,
            y(v) - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            x + bar_w / 2.0,
            top + plot_h + 18.0,
            xml_escape(name)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
        y(0.5),
        width - gap / 2.0,
        y(0.5)
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `report.csv` and `winrates.svg` into `out_dir`. Nothing is written
/// unless the report is complete.
pub fn emit_report(report: &EvalReport, out_dir: &Path, lineage: Option<&str>) -> Result<()> {
    if report.prompts.is_empty() {
        return Err(CapoError::EmptyScores);
    }
    if report.rewards.is_empty() {
        return Err(CapoError::EmptyScores);
    }
    let csv = render_csv(report, lineage)?;
    let svg = render_svg(report, lineage);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.csv"), csv)?;
    fs::write(out_dir.join("winrates.svg"), svg)?;
    Ok(())
}
