//! Centralised training: replay of whole episodes, the TD loss with the
//! message-variance penalty, target networks and ε-greedy exploration.

mod buffer;
mod config;
mod learner;
mod rollout;

pub use buffer::{Episode, EpisodeBuffer, Transition};
pub use config::{Behavior, Method, TrainConfig};
pub use learner::{Learner, LossReport};
pub use rollout::{rollout_episode, select_action, EpisodeStats, PolicyMode, Rollout};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::protocol::{CommConfig, CommLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub episodes: usize,
    /// Training episodes between evaluations.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            episodes: 2000,
            eval_every: 200,
            eval_episodes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub mean_eval_reward: f64,
    pub beta: f64,
    pub mean_msg_variance: f64,
    /// Mean per-step loss over the gradient steps since the previous row.
    pub loss: Option<f64>,
    pub avg_distance: f64,
    pub collisions: f64,
    pub captures: f64,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub mean_reward: f64,
    pub beta: f64,
    pub mean_msg_variance: f64,
    pub avg_distance: f64,
    pub collisions: f64,
    pub captures: f64,
    pub comm: CommLog,
    pub rollouts: Vec<Rollout>,
}

/// Greedy evaluation over one episode per seed.
pub fn evaluate(
    env: &mut dyn Environment,
    learner: &Learner,
    mode: PolicyMode,
    comm: CommConfig,
    seeds: &[u64],
) -> Result<EvalSummary> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    // greedy, so this stream is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut comm_log = CommLog::new(env.n_agents());
    let mut rollouts = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let r = rollout_episode(env, learner, mode, 0.0, comm, seed, &mut rng)?;
        comm_log.extend(r.comm.clone());
        rollouts.push(r);
    }
    let k = seeds.len() as f64;
    let mean = |f: fn(&EpisodeStats) -> f64| rollouts.iter().map(|r| f(&r.stats)).sum::<f64>() / k;
    Ok(EvalSummary {
        mean_reward: mean(|s| s.reward),
        beta: comm_log.beta(),
        mean_msg_variance: mean(|s| s.mean_msg_variance),
        avg_distance: mean(|s| s.avg_distance),
        collisions: mean(|s| s.collisions as f64),
        captures: mean(|s| s.captures as f64),
        comm: comm_log,
        rollouts,
    })
}

/// Evaluation mode and thresholds appropriate to `method`.
pub fn eval_policy(method: Method, comm: CommConfig) -> (PolicyMode, CommConfig) {
    match method.eval_comm(comm) {
        Some(c) => (PolicyMode::EvalGated, c),
        None => (PolicyMode::EvalFull, CommConfig::FULL),
    }
}

/// Environment seeds used for every evaluation of a run.
pub fn eval_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..count).map(|_| rng.gen()).collect()
}

pub struct TrainOutcome {
    pub learner: Learner,
    pub metrics: Vec<MetricsRow>,
    pub final_eval: EvalSummary,
    pub env_steps: usize,
}

/// Alternates ε-greedy rollouts and one gradient step per episode (once the
/// buffer holds a batch), evaluating every `schedule.eval_every` episodes
/// and after the last one.
pub fn train(
    env: &mut dyn Environment,
    method: Method,
    config: &TrainConfig,
    comm: CommConfig,
    schedule: Schedule,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if schedule.episodes == 0 || schedule.eval_every == 0 {
        return Err(Error::InvalidConfig("episodes and eval_every must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut learner = Learner::new(
        method,
        config.clone(),
        env.n_agents(),
        env.obs_dim(),
        env.n_actions(),
        env.state_dim(),
        &mut rng,
    )?;
    let seeds = eval_seeds(seed, schedule.eval_episodes.max(1));
    let (eval_mode, eval_comm) = eval_policy(method, comm);
    let mut buffer = EpisodeBuffer::new(config.buffer_capacity);
    let mut metrics = Vec::new();
    let mut env_steps = 0;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut last_eval = None;

    for episode in 1..=schedule.episodes {
        let eps = config.epsilon(env_steps);
        let env_seed = rng.gen();
        let rollout = rollout_episode(env, &learner, PolicyMode::TrainEpsGreedy, eps, CommConfig::FULL, env_seed, &mut rng)?;
        env_steps += rollout.episode.len();
        buffer.push(rollout.episode)?;

        if buffer.len() >= config.batch_size {
            let batch = buffer.sample(config.batch_size, &mut rng)?;
            let report = learner.compute_loss(&batch)?;
            let mean = report.mean();
            if !(mean <= config.divergence_threshold) {
                return Err(Error::Diverged {
                    episode,
                    loss: mean,
                    checkpoint: Box::new(learner.checkpoint()),
                });
            }
            learner.apply_gradients()?;
            loss_sum += mean;
            loss_count += 1;
        }

        if episode % schedule.eval_every == 0 || episode == schedule.episodes {
            let eval = evaluate(env, &learner, eval_mode, eval_comm, &seeds)?;
            metrics.push(MetricsRow {
                episode,
                mean_eval_reward: eval.mean_reward,
                beta: eval.beta,
                mean_msg_variance: eval.mean_msg_variance,
                loss: (loss_count > 0).then(|| loss_sum / loss_count as f64),
                avg_distance: eval.avg_distance,
                collisions: eval.collisions,
                captures: eval.captures,
            });
            loss_sum = 0.0;
            loss_count = 0;
            last_eval = Some(eval);
        }
    }
    Ok(TrainOutcome {
        learner,
        metrics,
        final_eval: last_eval.expect("the last episode always evaluates"),
        env_steps,
    })
}
