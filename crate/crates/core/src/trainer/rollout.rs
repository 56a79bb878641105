use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{Episode, Transition};
use super::config::Behavior;
use super::learner::Learner;
use crate::agent::{argmax, combine_all, message_variance};
use crate::env::Environment;
use crate::error::Result;
use crate::protocol::{protocol_step, CommConfig, CommLog, CommRecord, FrozenStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    /// ε-greedy with every message delivered.
    TrainEpsGreedy,
    /// Request/reply gating with the given thresholds.
    EvalGated,
    /// Every message delivered.
    EvalFull,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub reward: f64,
    pub steps: usize,
    /// Mean over steps of the per-agent mean distance to the nearest target.
    pub avg_distance: f64,
    pub collisions: usize,
    pub captures: usize,
    /// Mean over steps and live agents of the message variance.
    pub mean_msg_variance: f64,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub episode: Episode,
    pub comm: CommLog,
    pub stats: EpisodeStats,
    /// Per-step local values and messages, for replaying the protocol.
    pub frozen: Vec<FrozenStep>,
}

/// ε-greedy choice; ties go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..values.len())
    } else {
        argmax(values)
    }
}

/// Plays one episode from `env.reset(env_seed)`. `comm` only matters in
/// [`PolicyMode::EvalGated`].
pub fn rollout_episode<R: Rng + ?Sized>(
    env: &mut dyn Environment,
    learner: &Learner,
    mode: PolicyMode,
    epsilon: f64,
    comm: CommConfig,
    env_seed: u64,
    rng: &mut R,
) -> Result<Rollout> {
    let n = env.n_agents();
    let msgs = learner.method().uses_messages();
    let thresholds = match mode {
        PolicyMode::EvalGated => comm,
        PolicyMode::TrainEpsGreedy | PolicyMode::EvalFull => CommConfig::FULL,
    };
    let reset = env.reset(env_seed)?;
    let mut obs = reset.observations;
    let mut state = reset.state;
    let mut hidden = learner.initial_hidden(n);
    let mut steps = Vec::new();
    let mut log = CommLog::new(n);
    let mut frozen = Vec::new();
    let mut stats = EpisodeStats::default();
    let mut distance_sum = 0.0;
    let mut variance_sum = 0.0;
    let mut variance_count = 0usize;

    loop {
        let t = steps.len();
        let alive = env.alive();
        let team = learner.team_step(&obs, &hidden)?;
        let (values, record) = if msgs {
            for (m, _) in team.messages.iter().zip(&alive).filter(|(_, a)| **a) {
                variance_sum += message_variance(m);
                variance_count += 1;
            }
            let (gated, record) = protocol_step(t, &team.q_local, &team.messages, &alive, &thresholds)?;
            let values = match (mode, learner.config().behavior) {
                (PolicyMode::TrainEpsGreedy, Behavior::Local) => team.q_local.clone(),
                (PolicyMode::TrainEpsGreedy, Behavior::Combined) => combine_all(&team.q_local, &team.messages)?,
                _ => gated,
            };
            (values, record)
        } else {
            let record = CommRecord {
                t,
                requesters: Vec::new(),
                reply_pairs: Vec::new(),
                g_t: 0,
            };
            (team.q_local.clone(), record)
        };
        let epsilon = if mode == PolicyMode::TrainEpsGreedy { epsilon } else { 0.0 };
        let actions: Vec<usize> = values.iter().map(|v| select_action(v, epsilon, rng)).collect();
        log.push(record);
        frozen.push(FrozenStep {
            q_local: team.q_local,
            messages: team.messages,
            alive,
        });
        hidden = team.hidden;

        let result = env.step(&actions)?;
        stats.reward += result.reward;
        stats.collisions += result.info.collisions;
        stats.captures += result.info.captures;
        if !result.info.distances.is_empty() {
            distance_sum += result.info.distances.iter().sum::<f64>() / result.info.distances.len() as f64;
        }
        steps.push(Transition {
            observations: obs,
            state,
            actions,
            reward: result.reward,
            done: result.terminal,
        });
        obs = result.observations;
        state = result.state;
        if result.done {
            break;
        }
    }
    stats.steps = steps.len();
    stats.avg_distance = distance_sum / stats.steps as f64;
    stats.mean_msg_variance = if variance_count > 0 {
        variance_sum / variance_count as f64
    } else {
        0.0
    };
    Ok(Rollout {
        episode: Episode {
            steps,
            final_observations: obs,
            final_state: state,
        },
        comm: log,
        stats,
        frozen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{CoopNav, GridConfig, N_ACTIONS};
    use crate::trainer::{Method, TrainConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn setup(method: Method, seed: u64) -> (CoopNav, Learner) {
        let env = CoopNav::new(GridConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let learner = Learner::new(
            method,
            TrainConfig::default(),
            3,
            env.obs_dim(),
            N_ACTIONS,
            env.state_dim(),
            &mut rng,
        )
        .unwrap();
        (env, learner)
    }

    #[test]
    fn full_epsilon_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let values = [0.0, 5.0, 1.0, -2.0, 3.0];
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            counts[select_action(&values, 1.0, &mut rng)] += 1;
        }
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2}, p {p}, counts {counts:?}");
    }

    #[test]
    fn greedy_ties_take_lowest_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(select_action(&[0.0; 5], 0.0, &mut rng), 0);
        }
        assert_eq!(select_action(&[1.0, 2.0, 2.0], 0.0, &mut rng), 1);
    }

    #[test]
    fn zero_network_acts_deterministically() {
        let (mut env, mut learner) = setup(Method::VbcVdn, 0);
        let ids: Vec<_> = learner.params().ids().collect();
        for id in ids {
            learner.params_mut().value_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = rollout_episode(&mut env, &learner, PolicyMode::TrainEpsGreedy, 0.0, CommConfig::FULL, 3, &mut rng)
            .unwrap();
        assert!(r.episode.steps.iter().all(|s| s.actions == vec![0, 0, 0]));
    }

    #[test]
    fn full_thresholds_match_full_mode() {
        for seed in 0..3 {
            let (mut env, learner) = setup(Method::VbcVdn, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let gated =
                rollout_episode(&mut env, &learner, PolicyMode::EvalGated, 0.0, CommConfig::FULL, seed, &mut rng)
                    .unwrap();
            let full = rollout_episode(&mut env, &learner, PolicyMode::EvalFull, 0.0, CommConfig::default(), seed, &mut rng)
                .unwrap();
            assert_eq!(gated.episode, full.episode);
            assert_eq!(gated.comm, full.comm);
            assert_eq!(gated.comm.beta(), 1.0);
        }
    }

    #[test]
    fn no_comm_method_never_communicates() {
        let (mut env, learner) = setup(Method::Vdn, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rollout_episode(&mut env, &learner, PolicyMode::EvalFull, 0.0, CommConfig::FULL, 0, &mut rng).unwrap();
        assert_eq!(r.comm.beta(), 0.0);
        assert_eq!(r.stats.mean_msg_variance, 0.0);
        assert_eq!(r.stats.steps, 50);
    }

    #[test]
    fn stats_follow_the_episode() {
        let (mut env, learner) = setup(Method::VbcQmix, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rollout_episode(&mut env, &learner, PolicyMode::TrainEpsGreedy, 0.5, CommConfig::FULL, 7, &mut rng)
            .unwrap();
        assert_eq!(r.stats.reward, r.episode.total_reward());
        assert_eq!(r.frozen.len(), r.episode.len());
        assert!(r.stats.mean_msg_variance > 0.0);
        assert!(r.episode.steps.iter().all(|s| !s.done));
    }
}
