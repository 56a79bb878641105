use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vbc::env::EnvKind;
use vbc::harness::{self, gradcheck, ExperimentSpec, Manifest};
use vbc::numerics::gradcheck::FD_STEP;
use vbc::protocol::CommConfig;
use vbc::tabular::{verify_theorem1, PerturbationMode, Theorem1Config};
use vbc::trainer::{self, Behavior, Method, PolicyMode};

#[derive(Parser)]
#[command(name = "vbc", version, about = "Variance-based communication control for cooperative MARL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment and write its artifacts.
    Train(TrainArgs),
    /// Evaluate a trained seed directory under chosen thresholds.
    Eval(EvalArgs),
    /// Empirically check the tabular convergence bound.
    #[command(name = "verify-theorem1")]
    VerifyTheorem1(TheoremArgs),
    /// Run a list of experiment specs and print a comparison table.
    Sweep(SweepArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck(GradcheckArgs),
}

fn threshold(s: &str) -> Result<f64, String> {
    vbc::parse_threshold(s)
}

/// Experiment flags; each overrides the matching field of `--config`.
#[derive(Args, Debug, Default)]
struct SpecArgs {
    /// JSON experiment spec.
    #[arg(long, env = "VBC_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "VBC_NAME")]
    name: Option<String>,
    /// coop-nav | predator-prey
    #[arg(long, env = "VBC_ENV")]
    env: Option<EnvKind>,
    /// vbc-vdn | vbc-qmix | fc | vdn | qmix
    #[arg(long, env = "VBC_METHOD")]
    method: Option<Method>,
    /// Comma-separated seeds.
    #[arg(long, env = "VBC_SEEDS", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    #[arg(long, env = "VBC_WIDTH")]
    width: Option<usize>,
    #[arg(long, env = "VBC_HEIGHT")]
    height: Option<usize>,
    #[arg(long, env = "VBC_AGENTS")]
    agents: Option<usize>,
    /// Landmarks or prey.
    #[arg(long, env = "VBC_TARGETS")]
    targets: Option<usize>,
    #[arg(long, env = "VBC_SIGHT")]
    sight: Option<usize>,
    #[arg(long, env = "VBC_MAX_STEPS")]
    max_steps: Option<usize>,
    #[arg(long, env = "VBC_COLLISION_PENALTY")]
    collision_penalty: Option<f64>,

    #[arg(long, env = "VBC_GAMMA")]
    gamma: Option<f64>,
    #[arg(long, env = "VBC_LAMBDA")]
    lambda: Option<f64>,
    #[arg(long, env = "VBC_LR")]
    lr: Option<f64>,
    #[arg(long, env = "VBC_RMS_ALPHA")]
    rms_alpha: Option<f64>,
    #[arg(long, env = "VBC_RMS_EPS")]
    rms_eps: Option<f64>,
    #[arg(long, env = "VBC_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "VBC_BUFFER_CAPACITY")]
    buffer_capacity: Option<usize>,
    #[arg(long, env = "VBC_TARGET_PERIOD")]
    target_period: Option<usize>,
    #[arg(long, env = "VBC_EPS_START")]
    eps_start: Option<f64>,
    #[arg(long, env = "VBC_EPS_END")]
    eps_end: Option<f64>,
    #[arg(long, env = "VBC_EPS_HORIZON")]
    eps_horizon: Option<usize>,
    #[arg(long, env = "VBC_EMBED_DIM")]
    embed_dim: Option<usize>,
    #[arg(long, env = "VBC_HIDDEN_DIM")]
    hidden_dim: Option<usize>,
    #[arg(long, env = "VBC_ENCODER_HIDDEN")]
    encoder_hidden: Option<usize>,
    #[arg(long, env = "VBC_MIXER_HIDDEN")]
    mixer_hidden: Option<usize>,
    #[arg(long, env = "VBC_DIVERGENCE_THRESHOLD")]
    divergence_threshold: Option<f64>,
    /// combined | local
    #[arg(long, env = "VBC_BEHAVIOR")]
    behavior: Option<Behavior>,

    /// Confidence threshold; accepts inf and -inf.
    #[arg(long, env = "VBC_DELTA1", value_parser = threshold, allow_hyphen_values = true)]
    delta1: Option<f64>,
    /// Variance threshold; accepts inf and -inf.
    #[arg(long, env = "VBC_DELTA2", value_parser = threshold, allow_hyphen_values = true)]
    delta2: Option<f64>,

    #[arg(long, env = "VBC_EPISODES")]
    episodes: Option<usize>,
    #[arg(long, env = "VBC_EVAL_EVERY")]
    eval_every: Option<usize>,
    #[arg(long, env = "VBC_EVAL_EPISODES")]
    eval_episodes: Option<usize>,
}

macro_rules! apply {
    ($src:expr, $dst:expr, $($field:ident => $target:ident),* $(,)?) => {
        $(if let Some(v) = $src.$field.clone() { $dst.$target = v; })*
    };
}

impl SpecArgs {
    fn build(&self) -> anyhow::Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentSpec::default(),
        };
        if let Some(name) = &self.name {
            spec.name = Some(name.clone());
        }
        apply!(self, spec, env => env, method => method, seeds => seeds);
        apply!(self, spec.grid,
            width => width, height => height, agents => n_agents, targets => n_targets,
            sight => sight, max_steps => max_steps, collision_penalty => collision_penalty);
        apply!(self, spec.train,
            gamma => gamma, lambda => lambda, lr => lr, rms_alpha => rms_alpha, rms_eps => rms_eps,
            batch_size => batch_size, buffer_capacity => buffer_capacity, target_period => target_period,
            eps_start => eps_start, eps_end => eps_end, eps_horizon => eps_horizon,
            embed_dim => embed_dim, hidden_dim => hidden_dim, encoder_hidden => encoder_hidden,
            mixer_hidden => mixer_hidden, divergence_threshold => divergence_threshold, behavior => behavior);
        apply!(self, spec.schedule, episodes => episodes, eval_every => eval_every, eval_episodes => eval_episodes);
        spec.comm = CommConfig::new(
            self.delta1.unwrap_or(spec.comm.delta1),
            self.delta2.unwrap_or(spec.comm.delta2),
        )?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Output directory (one subdirectory per seed).
    #[arg(long, env = "VBC_OUT", default_value = "runs/train")]
    out: PathBuf,
    /// Seeds trained concurrently.
    #[arg(long, env = "VBC_JOBS", default_value_t = 1)]
    jobs: usize,
    /// Reproduce a single seed from its manifest instead; other spec flags
    /// are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Print the resolved spec and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Seed directory holding manifest.json and checkpoint.json.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_parser = threshold, allow_hyphen_values = true)]
    delta1: Option<f64>,
    #[arg(long, value_parser = threshold, allow_hyphen_values = true)]
    delta2: Option<f64>,
    /// Deliver every message regardless of thresholds.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    /// Seed for the evaluation layouts.
    #[arg(long, default_value_t = 1_000_000)]
    eval_seed: u64,
    /// Pick thresholds from a quantile grid: highest reward with
    /// β at most this value.
    #[arg(long)]
    tune_max_beta: Option<f64>,
    /// Write the evaluation's communication log here.
    #[arg(long)]
    commlog: Option<PathBuf>,
}

#[derive(Args)]
struct TheoremArgs {
    #[arg(long, default_value_t = 5)]
    states: usize,
    #[arg(long, default_value_t = 4)]
    actions: usize,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 3)]
    agents: usize,
    /// Bound G on each perturbation term.
    #[arg(long, default_value_t = 1.0)]
    bound: f64,
    /// zero | constant | uniform | adversarial-sign
    #[arg(long, default_value = "uniform")]
    mode: PerturbationMode,
    #[arg(long, default_value_t = 500_000)]
    updates: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.05)]
    slack: f64,
    #[arg(long, default_value_t = 0.7)]
    lr_exponent: f64,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON array of experiment specs.
    #[arg(long)]
    specs: PathBuf,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = FD_STEP)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn print(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<ExitCode> {
    if let Some(path) = &args.manifest {
        let manifest = Manifest::load(path)?;
        let metrics = harness::rerun(&manifest, &args.out)?;
        print(&json!({ "seed": manifest.seed, "dir": args.out, "checkpoints": metrics.len() }))?;
        return Ok(ExitCode::SUCCESS);
    }
    let spec = args.spec.build()?;
    if args.dry_run {
        print(&spec)?;
        return Ok(ExitCode::SUCCESS);
    }
    let summary = harness::run_experiment(&spec, &args.out, args.jobs)?;
    print(&summary)?;
    Ok(if summary.failed_seeds().is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let manifest = Manifest::load(&args.run.join("manifest.json"))?;
    let (mut env, learner) = harness::load_learner(&manifest, &args.run.join("checkpoint.json"))?;
    let seeds = trainer::eval_seeds(args.eval_seed, args.episodes.max(1));
    let method = manifest.spec.method;
    let mut comm = CommConfig::new(
        args.delta1.unwrap_or(manifest.spec.comm.delta1),
        args.delta2.unwrap_or(manifest.spec.comm.delta2),
    )?;
    let mut tuning = None;
    if let Some(max_beta) = args.tune_max_beta {
        if !method.uses_messages() {
            bail!("{method} does not communicate; nothing to tune");
        }
        let probe = trainer::evaluate(env.as_mut(), &learner, PolicyMode::EvalFull, CommConfig::FULL, &seeds)?;
        let frozen: Vec<_> = probe.rollouts.into_iter().flat_map(|r| r.frozen).collect();
        let grid = harness::quantile_grid(&frozen, &[0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0])?;
        let tune_seeds = trainer::eval_seeds(args.eval_seed.wrapping_add(1), args.episodes.max(1));
        let points = harness::delta_sweep(env.as_mut(), &learner, &grid, &tune_seeds)?;
        match harness::tune(&points, max_beta) {
            Some(best) => comm = best.comm,
            None => bail!("no threshold pair reaches β ≤ {max_beta}"),
        }
        tuning = Some(points);
    }
    let (mode, comm) = if args.full {
        (PolicyMode::EvalFull, CommConfig::FULL)
    } else {
        trainer::eval_policy(method, comm)
    };
    let result = trainer::evaluate(env.as_mut(), &learner, mode, comm, &seeds)?;
    if let Some(path) = &args.commlog {
        result.comm.save_jsonl(path)?;
    }
    print(&json!({
        "method": method,
        "comm": comm,
        "mean_reward": result.mean_reward,
        "beta": result.beta,
        "mean_msg_variance": result.mean_msg_variance,
        "avg_distance": result.avg_distance,
        "collisions": result.collisions,
        "captures": result.captures,
        "tuning": tuning,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn verify(args: TheoremArgs) -> anyhow::Result<ExitCode> {
    let mut reports = Vec::new();
    for &seed in &args.seeds {
        let cfg = Theorem1Config {
            n_states: args.states,
            n_actions: args.actions,
            gamma: args.gamma,
            lambda: args.lambda,
            n_agents: args.agents,
            bound_g: args.bound,
            mode: args.mode,
            updates: args.updates,
            seed,
            slack: args.slack,
            lr_exponent: args.lr_exponent,
        };
        reports.push(verify_theorem1(&cfg)?);
    }
    let pass = reports.iter().all(|r| r.pass);
    print(&reports)?;
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn sweep(args: SweepArgs) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(&args.specs).with_context(|| format!("reading {}", args.specs.display()))?;
    let specs: Vec<ExperimentSpec> = serde_json::from_str(&text)?;
    let rows = harness::sweep(&specs, &args.out, args.jobs)?;
    print(&rows)?;
    Ok(ExitCode::SUCCESS)
}

fn grad(args: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let checks = gradcheck::check_all(0..args.seeds, args.step)?;
    let pass = checks.iter().all(|c| c.max_rel_error < args.tolerance);
    print(&checks)?;
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::VerifyTheorem1(a) => verify(a),
        Command::Sweep(a) => sweep(a),
        Command::Gradcheck(a) => grad(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
