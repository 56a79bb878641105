//! Experiment runner: seeded runs with on-disk artifacts, aggregation with
//! confidence intervals, sweeps and threshold tuning.

pub mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::agent::message_variance;
use crate::env::{self, EnvKind, Environment, GridConfig};
use crate::error::{Error, Result};
use crate::protocol::{confidence_gap, replay, CommConfig, FrozenStep};
use crate::trainer::{self, evaluate, Learner, MetricsRow, Method, PolicyMode, Schedule, TrainConfig};

pub const VERSION: &str = concat!("vbc-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    /// Row label in sweep tables; the method id when absent.
    pub name: Option<String>,
    pub env: EnvKind,
    pub grid: GridConfig,
    pub method: Method,
    pub train: TrainConfig,
    pub comm: CommConfig,
    pub seeds: Vec<u64>,
    pub schedule: Schedule,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: None,
            env: EnvKind::CoopNav,
            grid: GridConfig::default(),
            method: Method::VbcVdn,
            train: TrainConfig::default(),
            comm: CommConfig::default(),
            seeds: (0..5).collect(),
            schedule: Schedule::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.id().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("experiment needs at least one seed".into()));
        }
        if self.schedule.episodes == 0 || self.schedule.eval_every == 0 || self.schedule.eval_episodes == 0 {
            return Err(Error::InvalidConfig("schedule counts must be positive".into()));
        }
        self.grid.validate()?;
        self.train.validate()
    }

    pub fn make_env(&self, seed: u64) -> Result<Box<dyn Environment>> {
        env::make(
            self.env,
            GridConfig {
                seed,
                ..self.grid.clone()
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Everything needed to reproduce one seed of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub spec: ExperimentSpec,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum SeedStatus {
    Completed,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    #[serde(flatten)]
    pub status: SeedStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub episode: usize,
    pub n_seeds: usize,
    pub mean_reward: f64,
    /// Half-width of the 95% interval; absent with fewer than 2 seeds.
    pub reward_ci95: Option<f64>,
    pub beta: f64,
    pub msg_variance: f64,
    pub avg_distance: f64,
    pub avg_distance_ci95: Option<f64>,
    pub collisions: f64,
    pub captures: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub method: Method,
    pub env: EnvKind,
    pub seeds: Vec<SeedOutcome>,
    pub checkpoints: Vec<CheckpointSummary>,
    pub final_beta: Option<f64>,
    pub final_msg_variance: Option<f64>,
}

impl RunSummary {
    pub fn final_checkpoint(&self) -> Option<&CheckpointSummary> {
        self.checkpoints.last()
    }

    pub fn failed_seeds(&self) -> Vec<u64> {
        self.seeds
            .iter()
            .filter(|s| matches!(s.status, SeedStatus::Failed { .. }))
            .map(|s| s.seed)
            .collect()
    }
}

/// Mean and 95% Student-t half-width.
pub fn mean_ci95(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.975);
    (mean, Some(t * (var / n as f64).sqrt()))
}

/// Per-checkpoint aggregation across seeds; only seeds that reached a
/// checkpoint contribute to it.
pub fn aggregate(per_seed: &[Vec<MetricsRow>]) -> Vec<CheckpointSummary> {
    let mut episodes: Vec<usize> = per_seed.iter().flatten().map(|r| r.episode).collect();
    episodes.sort_unstable();
    episodes.dedup();
    episodes
        .into_iter()
        .map(|episode| {
            let rows: Vec<&MetricsRow> = per_seed
                .iter()
                .filter_map(|rows| rows.iter().find(|r| r.episode == episode))
                .collect();
            let col = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let mean = |f: fn(&MetricsRow) -> f64| mean_ci95(&col(f)).0;
            let (mean_reward, reward_ci95) = mean_ci95(&col(|r| r.mean_eval_reward));
            let (avg_distance, avg_distance_ci95) = mean_ci95(&col(|r| r.avg_distance));
            CheckpointSummary {
                episode,
                n_seeds: rows.len(),
                mean_reward,
                reward_ci95,
                beta: mean(|r| r.beta),
                msg_variance: mean(|r| r.mean_msg_variance),
                avg_distance,
                avg_distance_ci95,
                collisions: mean(|r| r.collisions),
                captures: mean(|r| r.captures),
            }
        })
        .collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}"))
}

/// Trains one seed and writes `metrics.csv`, `manifest.json`,
/// `commlog.jsonl` (final evaluation) and `checkpoint.json` into `dir`.
/// On divergence the checkpoint carried by the error is still written.
pub fn run_seed(spec: &ExperimentSpec, seed: u64, dir: &Path) -> Result<Vec<MetricsRow>> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: VERSION.to_string(),
        seed,
        spec: ExperimentSpec {
            seeds: vec![seed],
            ..spec.clone()
        },
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let mut env = spec.make_env(seed)?;
    match trainer::train(env.as_mut(), spec.method, &spec.train, spec.comm, spec.schedule, seed) {
        Ok(out) => {
            write_metrics(&dir.join("metrics.csv"), &out.metrics)?;
            out.final_eval.comm.save_jsonl(&dir.join("commlog.jsonl"))?;
            out.learner.checkpoint().save(&dir.join("checkpoint.json"))?;
            Ok(out.metrics)
        }
        Err(Error::Diverged {
            episode,
            loss,
            checkpoint,
        }) => {
            checkpoint.save(&dir.join("checkpoint.json"))?;
            Err(Error::Diverged {
                episode,
                loss,
                checkpoint,
            })
        }
        Err(e) => Err(e),
    }
}

/// Re-runs the seed described by a manifest into `dir`.
pub fn rerun(manifest: &Manifest, dir: &Path) -> Result<Vec<MetricsRow>> {
    run_seed(&manifest.spec, manifest.seed, dir)
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Trains every seed (up to `parallelism` at once) under `out_dir`, then
/// aggregates the written CSVs. A failing seed is recorded and skipped.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path, parallelism: usize) -> Result<RunSummary> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let outcomes: Vec<SeedOutcome> = pool(parallelism)?.install(|| {
        spec.seeds
            .par_iter()
            .map(|&seed| {
                let dir = seed_dir(out_dir, seed);
                let status = match run_seed(spec, seed, &dir) {
                    Ok(_) => SeedStatus::Completed,
                    Err(e) => SeedStatus::Failed { error: e.to_string() },
                };
                SeedOutcome { seed, dir, status }
            })
            .collect()
    });
    let summary = summarize(spec, outcomes)?;
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    write_summary_csv(&out_dir.join("summary.csv"), &summary.checkpoints)?;
    Ok(summary)
}

/// Builds the summary from the `metrics.csv` of every completed seed.
pub fn summarize(spec: &ExperimentSpec, seeds: Vec<SeedOutcome>) -> Result<RunSummary> {
    let mut per_seed = Vec::new();
    for s in &seeds {
        if s.status == SeedStatus::Completed {
            per_seed.push(read_metrics(&s.dir.join("metrics.csv"))?);
        }
    }
    let checkpoints = aggregate(&per_seed);
    let last = checkpoints.last();
    Ok(RunSummary {
        label: spec.label(),
        method: spec.method,
        env: spec.env,
        final_beta: last.map(|c| c.beta),
        final_msg_variance: last.map(|c| c.msg_variance),
        checkpoints,
        seeds,
    })
}

fn write_summary_csv(path: &Path, rows: &[CheckpointSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub method: Method,
    pub lambda: f64,
    #[serde(with = "crate::serde_ext")]
    pub delta1: f64,
    #[serde(with = "crate::serde_ext")]
    pub delta2: f64,
    pub completed_seeds: usize,
    pub final_reward: Option<f64>,
    pub final_reward_ci95: Option<f64>,
    pub beta: Option<f64>,
    pub msg_variance: Option<f64>,
    pub avg_distance: Option<f64>,
}

/// Runs `specs` (one row each, in input order). All specs must share the
/// environment.
pub fn sweep(specs: &[ExperimentSpec], out_dir: &Path, parallelism: usize) -> Result<Vec<SweepRow>> {
    if let Some(first) = specs.first() {
        if specs.iter().any(|s| s.env != first.env || s.grid != first.grid) {
            return Err(Error::InvalidConfig("sweep specs use different environments".into()));
        }
    }
    for s in specs {
        s.validate()?;
    }
    let summaries: Vec<Result<RunSummary>> = pool(parallelism)?.install(|| {
        specs
            .par_iter()
            .enumerate()
            .map(|(k, spec)| run_experiment(spec, &out_dir.join(format!("{k:02}-{}", spec.label())), 1))
            .collect()
    });
    let mut rows = Vec::with_capacity(specs.len());
    for (spec, summary) in specs.iter().zip(summaries) {
        let summary = summary?;
        let last = summary.final_checkpoint();
        rows.push(SweepRow {
            label: summary.label.clone(),
            method: spec.method,
            lambda: spec.method.effective_lambda(spec.train.lambda),
            delta1: spec.comm.delta1,
            delta2: spec.comm.delta2,
            completed_seeds: summary.seeds.len() - summary.failed_seeds().len(),
            final_reward: last.map(|c| c.mean_reward),
            final_reward_ci95: last.and_then(|c| c.reward_ci95),
            beta: summary.final_beta,
            msg_variance: summary.final_msg_variance,
            avg_distance: last.map(|c| c.avg_distance),
        });
    }
    if !specs.is_empty() {
        fs::create_dir_all(out_dir)?;
        let mut w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

/// β of each threshold pair replayed over a frozen trajectory.
pub fn frozen_beta_sweep(trajectory: &[FrozenStep], configs: &[CommConfig]) -> Result<Vec<f64>> {
    configs.iter().map(|c| Ok(replay(trajectory, c)?.beta())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub comm: CommConfig,
    pub beta: f64,
    pub mean_reward: f64,
}

/// Threshold grid from quantiles of the confidence gaps and message
/// variances seen along `trajectory`.
pub fn quantile_grid(trajectory: &[FrozenStep], quantiles: &[f64]) -> Result<Vec<CommConfig>> {
    let mut gaps = Vec::new();
    let mut vars = Vec::new();
    for step in trajectory {
        for q in &step.q_local {
            gaps.push(confidence_gap(q)?);
        }
        vars.extend(step.messages.iter().map(|m| message_variance(m)));
    }
    let pick = |mut v: Vec<f64>| -> Vec<f64> {
        if v.is_empty() {
            return vec![0.0];
        }
        v.sort_by(f64::total_cmp);
        let mut out: Vec<f64> = quantiles
            .iter()
            .map(|&p| v[((v.len() - 1) as f64 * p.clamp(0.0, 1.0)).round() as usize])
            .collect();
        out.dedup();
        out
    };
    let (d1, d2) = (pick(gaps), pick(vars));
    let mut grid = Vec::with_capacity(d1.len() * d2.len());
    for &a in &d1 {
        for &b in &d2 {
            grid.push(CommConfig::new(a, b)?);
        }
    }
    Ok(grid)
}

/// Greedy gated evaluation of `learner` for every threshold pair.
pub fn delta_sweep(
    env: &mut dyn Environment,
    learner: &Learner,
    grid: &[CommConfig],
    seeds: &[u64],
) -> Result<Vec<DeltaPoint>> {
    grid.iter()
        .map(|&comm| {
            let eval = evaluate(env, learner, PolicyMode::EvalGated, comm, seeds)?;
            Ok(DeltaPoint {
                comm,
                beta: eval.beta,
                mean_reward: eval.mean_reward,
            })
        })
        .collect()
}

/// Highest-reward point with `β ≤ max_beta`; the first such point wins ties.
pub fn tune(points: &[DeltaPoint], max_beta: f64) -> Option<DeltaPoint> {
    points
        .iter()
        .filter(|p| p.beta <= max_beta)
        .fold(None, |best: Option<DeltaPoint>, p| match best {
            Some(b) if b.mean_reward >= p.mean_reward => Some(b),
            _ => Some(*p),
        })
}

/// Loads a trained learner for `manifest` from a checkpoint file.
pub fn load_learner(manifest: &Manifest, checkpoint: &Path) -> Result<(Box<dyn Environment>, Learner)> {
    let spec = &manifest.spec;
    let env = spec.make_env(manifest.seed)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(manifest.seed);
    let mut learner = Learner::new(
        spec.method,
        spec.train.clone(),
        env.n_agents(),
        env.obs_dim(),
        env.n_actions(),
        env.state_dim(),
        &mut rng,
    )?;
    learner.load_checkpoint(&crate::numerics::Checkpoint::load(checkpoint)?)?;
    Ok((env, learner))
}
