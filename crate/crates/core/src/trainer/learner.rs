use rand::Rng;
use serde::Serialize;

use super::buffer::Episode;
use super::config::{Method, TrainConfig};
use crate::agent::{combine_all, message_variance, message_variance_grad, AgentConfig, AgentNetwork, TeamOutput};
use crate::error::{check_dim, Error, Result};
use crate::mixer::Mixer;
use crate::numerics::{Checkpoint, ParamBlock};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    /// `td_loss + variance_loss`, summed over episodes and steps.
    pub loss: f64,
    pub td_loss: f64,
    pub variance_loss: f64,
    pub steps: usize,
}

impl LossReport {
    pub fn mean(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.loss / self.steps as f64
        }
    }

    fn add(&mut self, other: LossReport) {
        self.loss += other.loss;
        self.td_loss += other.td_loss;
        self.variance_loss += other.variance_loss;
        self.steps += other.steps;
    }
}

/// Online and target networks plus the optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    method: Method,
    config: TrainConfig,
    params: ParamBlock,
    target: ParamBlock,
    agent: AgentNetwork,
    mixer: Mixer,
    grad_steps: usize,
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(
        method: Method,
        config: TrainConfig,
        n_agents: usize,
        obs_dim: usize,
        n_actions: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamBlock::new();
        let agent_cfg = AgentConfig {
            obs_dim,
            n_actions,
            embed_dim: config.embed_dim,
            hidden_dim: config.hidden_dim,
            encoder_hidden: config.encoder_hidden,
        };
        let agent = AgentNetwork::new(&mut params, agent_cfg, rng);
        let mixer = Mixer::new(method.mixer(), &mut params, n_agents, state_dim, config.mixer_hidden, rng);
        Ok(Self::from_parts(method, config, params, agent, mixer))
    }

    /// Assembles a learner from prebuilt networks; the target starts as a
    /// copy of `params`.
    pub fn from_parts(method: Method, config: TrainConfig, params: ParamBlock, agent: AgentNetwork, mixer: Mixer) -> Self {
        Self {
            method,
            config,
            target: params.clone(),
            params,
            agent,
            mixer,
            grad_steps: 0,
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn lambda(&self) -> f64 {
        self.method.effective_lambda(self.config.lambda)
    }

    pub fn params(&self) -> &ParamBlock {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamBlock {
        &mut self.params
    }

    pub fn target_params(&self) -> &ParamBlock {
        &self.target
    }

    pub fn agent(&self) -> &AgentNetwork {
        &self.agent
    }

    pub fn mixer(&self) -> &Mixer {
        &self.mixer
    }

    pub fn grad_steps(&self) -> usize {
        self.grad_steps
    }

    pub fn n_actions(&self) -> usize {
        self.agent.n_actions()
    }

    pub fn initial_hidden(&self, n_agents: usize) -> Vec<Vec<f64>> {
        vec![self.agent.initial_hidden(); n_agents]
    }

    /// One forward step of every agent under the online parameters.
    pub fn team_step(&self, observations: &[Vec<f64>], hidden: &[Vec<f64>]) -> Result<TeamOutput> {
        self.agent
            .team_forward(&self.params, observations, hidden, self.method.uses_messages())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint()
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.params.load_checkpoint(ckpt)?;
        self.target.copy_values_from(&self.params)
    }

    /// Overwrites the target network with `values`.
    pub fn set_target(&mut self, values: &ParamBlock) -> Result<()> {
        self.target.copy_values_from(values)
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.params)
    }

    /// Target-network estimate of `max_a Q_tot` after each step of `ep`,
    /// using per-agent maxima of the combined values.
    fn bootstrap_values(&self, ep: &Episode) -> Result<Vec<f64>> {
        let n = ep.final_observations.len();
        let msgs = self.method.uses_messages();
        let mut hidden = self.initial_hidden(n);
        let mut out = Vec::with_capacity(ep.len());
        for t in 0..=ep.len() {
            let (obs, state) = match ep.steps.get(t) {
                Some(tr) => (&tr.observations, &tr.state),
                None => (&ep.final_observations, &ep.final_state),
            };
            let team = self.agent.team_forward(&self.target, obs, &hidden, msgs)?;
            hidden = team.hidden;
            if t == 0 {
                continue;
            }
            let q = if msgs {
                combine_all(&team.q_local, &team.messages)?
            } else {
                team.q_local
            };
            let best: Vec<f64> = q
                .iter()
                .map(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            out.push(self.mixer.mix(&self.target, &best, state)?);
        }
        Ok(out)
    }

    /// Loss of `batch` under `params` without touching gradients.
    pub fn loss_value(&self, params: &ParamBlock, batch: &[&Episode]) -> Result<LossReport> {
        let mut agent = self.agent.clone();
        let mut mixer = self.mixer.clone();
        let mut total = LossReport::default();
        for (b, ep) in batch.iter().enumerate() {
            let targets = self.bootstrap_values(ep)?;
            let fwd = forward_episode(&mut agent, &mut mixer, params, ep, &targets, &self.config, self.lambda(), self.method, false)
                .map_err(|e| annotate(e, b))?;
            total.add(fwd.report);
        }
        Ok(total)
    }

    /// Clears gradients, then accumulates `∂loss/∂θ` for the summed loss
    /// over `batch`.
    pub fn compute_loss(&mut self, batch: &[&Episode]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        self.params.zero_grad();
        self.agent.clear_tapes();
        self.mixer.clear_tape();
        let lambda = self.lambda();
        let mut total = LossReport::default();
        for (b, ep) in batch.iter().enumerate() {
            let targets = self.bootstrap_values(ep)?;
            let fwd = forward_episode(
                &mut self.agent,
                &mut self.mixer,
                &self.params,
                ep,
                &targets,
                &self.config,
                lambda,
                self.method,
                true,
            )
            .map_err(|e| annotate(e, b))?;
            self.backward_episode(ep, &fwd, lambda)?;
            total.add(fwd.report);
        }
        Ok(total)
    }

    fn backward_episode(&mut self, ep: &Episode, fwd: &EpisodeForward, lambda: f64) -> Result<()> {
        let n = ep.final_observations.len();
        let n_actions = self.n_actions();
        let msgs = self.method.uses_messages();
        let mut d_h = vec![vec![0.0; self.agent.hidden_dim()]; n];
        for t in (0..ep.len()).rev() {
            let d_chosen = self.mixer.backward(&mut self.params, fwd.d_tot[t])?;
            let d_q: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut g = vec![0.0; n_actions];
                    g[ep.steps[t].actions[i]] = d_chosen[i];
                    g
                })
                .collect();
            for i in (0..n).rev() {
                let d_c = if msgs {
                    let m = &fwd.messages[t][i];
                    let mut d_m: Vec<f64> = message_variance_grad(m).into_iter().map(|g| lambda * g).collect();
                    for (k, dq) in d_q.iter().enumerate() {
                        if k != i {
                            for (a, b) in d_m.iter_mut().zip(dq) {
                                *a += b;
                            }
                        }
                    }
                    let mut d_c = self.agent.encode_backward(&mut self.params, &d_m)?;
                    for (a, b) in d_c.iter_mut().zip(&d_h[i]) {
                        *a += b;
                    }
                    d_c
                } else {
                    d_h[i].clone()
                };
                d_h[i] = self.agent.local_backward(&mut self.params, &d_q[i], &d_c)?;
            }
        }
        Ok(())
    }

    /// Applies one RMSprop step with the accumulated gradients and copies
    /// the target network when the period elapses.
    pub fn apply_gradients(&mut self) -> Result<()> {
        let c = &self.config;
        self.params.rmsprop_step(c.lr, c.rms_alpha, c.rms_eps)?;
        self.grad_steps += 1;
        if self.grad_steps % self.config.target_period == 0 {
            self.sync_target()?;
        }
        Ok(())
    }

    pub fn train_step(&mut self, batch: &[&Episode]) -> Result<LossReport> {
        let report = self.compute_loss(batch)?;
        self.apply_gradients()?;
        Ok(report)
    }
}

fn annotate(e: Error, b: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("batch episode {b}: {msg}")),
        other => other,
    }
}

struct EpisodeForward {
    report: LossReport,
    /// `∂loss/∂Q_tot` per step.
    d_tot: Vec<f64>,
    messages: Vec<Vec<Vec<f64>>>,
}

#[allow(clippy::too_many_arguments)]
fn forward_episode(
    agent: &mut AgentNetwork,
    mixer: &mut Mixer,
    params: &ParamBlock,
    ep: &Episode,
    targets: &[f64],
    cfg: &TrainConfig,
    lambda: f64,
    method: Method,
    record: bool,
) -> Result<EpisodeForward> {
    let n = ep.final_observations.len();
    let msgs = method.uses_messages();
    let mut hidden = vec![agent.initial_hidden(); n];
    let mut out = EpisodeForward {
        report: LossReport::default(),
        d_tot: Vec::with_capacity(ep.len()),
        messages: Vec::with_capacity(ep.len()),
    };
    for (t, tr) in ep.steps.iter().enumerate() {
        check_dim("transition observations", n, tr.observations.len())?;
        check_dim("transition actions", n, tr.actions.len())?;
        let mut q_local = Vec::with_capacity(n);
        let mut messages = Vec::with_capacity(n);
        for i in 0..n {
            let local = if record {
                agent.local_forward_record(params, &tr.observations[i], &hidden[i])?
            } else {
                agent.local_forward(params, &tr.observations[i], &hidden[i])?
            };
            if msgs {
                messages.push(if record {
                    agent.encode_record(params, &local.c)?
                } else {
                    agent.encode(params, &local.c)?
                });
            }
            q_local.push(local.q_local);
            hidden[i] = local.c;
        }
        let q = if msgs { combine_all(&q_local, &messages)? } else { q_local };
        let mut chosen = Vec::with_capacity(n);
        for (i, (values, &a)) in q.iter().zip(&tr.actions).enumerate() {
            let v = values.get(a).ok_or(Error::InvalidAction {
                agent: i,
                action: a,
                n_actions: values.len(),
            })?;
            chosen.push(*v);
        }
        let q_tot = if record {
            mixer.mix_record(params, &chosen, &tr.state)?
        } else {
            mixer.mix(params, &chosen, &tr.state)?
        };
        let y = if tr.done {
            tr.reward
        } else {
            tr.reward + cfg.gamma * targets[t]
        };
        let td = q_tot - y;
        let variance: f64 = messages.iter().map(|m| message_variance(m)).sum();
        let step_loss = td * td + lambda * variance;
        if !step_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {t}: q_tot {q_tot}, target {y}, message variance {variance}"
            )));
        }
        out.report.td_loss += td * td;
        out.report.variance_loss += lambda * variance;
        out.report.loss += step_loss;
        out.report.steps += 1;
        out.d_tot.push(2.0 * td);
        out.messages.push(messages);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::MixerKind;
    use crate::numerics::gradcheck::{check_param_gradients, FD_STEP};
    use crate::numerics::{Matrix, LEAKY_SLOPE};
    use crate::trainer::buffer::Transition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(lambda: f64) -> TrainConfig {
        TrainConfig {
            gamma: 0.9,
            lambda,
            embed_dim: 3,
            hidden_dim: 3,
            encoder_hidden: 4,
            mixer_hidden: 3,
            batch_size: 1,
            buffer_capacity: 4,
            target_period: 3,
            ..TrainConfig::default()
        }
    }

    fn random_episode(rng: &mut ChaCha8Rng, n: usize, obs_dim: usize, state_dim: usize, len: usize) -> Episode {
        let mut v = |k: usize| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let steps = (0..len)
            .map(|t| Transition {
                observations: (0..n).map(|_| v(obs_dim)).collect(),
                state: v(state_dim),
                actions: vec![t % 2, (t + 1) % 2][..n].to_vec(),
                reward: v(1)[0],
                done: false,
            })
            .collect();
        Episode {
            steps,
            final_observations: (0..n).map(|_| v(obs_dim)).collect(),
            final_state: v(state_dim),
        }
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let mut worst: f64 = 0.0;
        for seed in 0..10u64 {
            for method in [Method::VbcVdn, Method::VbcQmix] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut learner = Learner::new(method, tiny_config(0.5), 2, 3, 2, 4, &mut rng).unwrap();
                // separate target so bootstrapping is not the identity
                let other = Learner::new(method, tiny_config(0.5), 2, 3, 2, 4, &mut rng).unwrap();
                learner.target = other.params;
                let ep = random_episode(&mut rng, 2, 3, 4, 2);
                learner.compute_loss(&[&ep]).unwrap();
                let frozen = learner.clone();
                let mut params = learner.params.clone();
                let report = check_param_gradients(&mut params, FD_STEP, |p| {
                    Ok(frozen.loss_value(p, &[&ep])?.loss)
                })
                .unwrap();
                worst = worst.max(report.max_rel_error);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn recorded_and_plain_losses_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut learner = Learner::new(Method::VbcQmix, tiny_config(0.3), 2, 3, 2, 4, &mut rng).unwrap();
        let eps: Vec<Episode> = (0..3).map(|k| random_episode(&mut rng, 2, 3, 4, 2 + k)).collect();
        let batch: Vec<&Episode> = eps.iter().collect();
        let plain = learner.loss_value(&learner.params.clone(), &batch).unwrap();
        let recorded = learner.compute_loss(&batch).unwrap();
        assert_eq!(plain, recorded);
        assert!(learner.agent.tapes_empty());
    }

    /// TD-only loss written directly from the per-step definitions.
    fn td_only_loss(learner: &Learner, ep: &Episode) -> f64 {
        let agent = learner.agent();
        let n = ep.final_observations.len();
        let values = |params: &ParamBlock| -> Vec<Vec<Vec<f64>>> {
            let mut h = vec![agent.initial_hidden(); n];
            let mut out = Vec::new();
            let all_obs = ep.steps.iter().map(|s| &s.observations).chain([&ep.final_observations]);
            for obs in all_obs {
                let team = agent.team_forward(params, obs, &h, true).unwrap();
                h = team.hidden.clone();
                out.push(combine_all(&team.q_local, &team.messages).unwrap());
            }
            out
        };
        let online = values(learner.params());
        let target = values(learner.target_params());
        let mut loss = 0.0;
        for (t, tr) in ep.steps.iter().enumerate() {
            let q_tot: f64 = (0..n).map(|i| online[t][i][tr.actions[i]]).sum();
            let next: f64 = target[t + 1]
                .iter()
                .map(|q| q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum();
            let y = tr.reward + if tr.done { 0.0 } else { 0.9 * next };
            loss += (q_tot - y).powi(2);
        }
        loss
    }

    #[test]
    fn zero_lambda_is_plain_td() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let learner = Learner::new(Method::VbcVdn, tiny_config(0.0), 2, 3, 2, 4, &mut rng).unwrap();
            let ep = random_episode(&mut rng, 2, 3, 4, 4);
            let report = learner.loss_value(learner.params(), &[&ep]).unwrap();
            assert_eq!(report.variance_loss, 0.0);
            let oracle = td_only_loss(&learner, &ep);
            assert!((report.loss - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{} vs {oracle}", report.loss);
        }
    }

    #[test]
    fn constant_encoder_has_no_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut learner = Learner::new(Method::VbcVdn, tiny_config(2.0), 2, 3, 2, 4, &mut rng).unwrap();
        let (_, fc2) = learner.agent().encoder_layers();
        let (w, b) = (fc2.weight_id(), fc2.bias_id());
        learner.params.value_mut(w).fill(0.0);
        learner.params.value_mut(b).fill(0.7);
        learner.sync_target().unwrap();
        let ep = random_episode(&mut rng, 2, 3, 4, 3);
        let report = learner.compute_loss(&[&ep]).unwrap();
        assert_eq!(report.variance_loss, 0.0);
        // the message is constant, so only TD gradient reaches the bias and
        // it shifts all components equally
        let g = learner.params.grad(b).as_slice().to_vec();
        assert!(g.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "{g:?}");

        let mut zero = learner.clone();
        zero.config.lambda = 0.0;
        zero.compute_loss(&[&ep]).unwrap();
        for id in learner.params.ids() {
            assert_eq!(learner.params.grad(id), zero.params.grad(id), "{}", learner.params.name(id));
        }
    }

    /// `N = 2`, `|A| = 2`, one terminal step, scalar layers set by hand.
    #[test]
    fn hand_computed_one_step_loss() {
        let cfg = TrainConfig {
            lambda: 0.5,
            embed_dim: 1,
            hidden_dim: 1,
            encoder_hidden: 1,
            ..tiny_config(0.5)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut learner = Learner::new(Method::VbcVdn, cfg, 2, 1, 2, 1, &mut rng).unwrap();
        let set = |l: &mut Learner, name: &str, rows: usize, cols: usize, v: &[f64]| {
            let id = l.params.find(name).unwrap();
            *l.params.value_mut(id) = Matrix::from_vec(rows, cols, v.to_vec()).unwrap();
        };
        for g in ["z", "r", "h"] {
            for p in ["w", "u", "b"] {
                set(&mut learner, &format!("agent.gru.{p}_{g}"), 1, 1, &[0.0]);
            }
        }
        set(&mut learner, "agent.gru.w_h", 1, 1, &[1.0]);
        set(&mut learner, "agent.embed.weight", 1, 1, &[1.0]);
        set(&mut learner, "agent.embed.bias", 1, 1, &[0.0]);
        set(&mut learner, "agent.head.weight", 2, 1, &[1.0, -1.0]);
        set(&mut learner, "agent.head.bias", 2, 1, &[0.0, 0.5]);
        set(&mut learner, "encoder.fc1.weight", 1, 1, &[1.0]);
        set(&mut learner, "encoder.fc1.bias", 1, 1, &[0.0]);
        set(&mut learner, "encoder.fc2.weight", 2, 1, &[2.0, 0.0]);
        set(&mut learner, "encoder.fc2.bias", 2, 1, &[0.0, 0.0]);
        learner.sync_target().unwrap();

        let ep = Episode {
            steps: vec![Transition {
                observations: vec![vec![1.0], vec![-1.0]],
                state: vec![0.0],
                actions: vec![1, 0],
                reward: 1.0,
                done: true,
            }],
            final_observations: vec![vec![0.0], vec![0.0]],
            final_state: vec![0.0],
        };
        // z = σ(0) = 1/2 and h_prev = 0, so c = tanh(e)/2
        let c0 = 0.5 * 1f64.tanh();
        let c1 = 0.5 * (-LEAKY_SLOPE).tanh();
        // q_i = (c_i, 0.5 − c_i); m_i = (2·leaky(c_i), 0)
        let m0 = 2.0 * c0;
        let m1 = 2.0 * LEAKY_SLOPE * c1;
        let q_tot = (0.5 - c0 + 0.0) + (c1 + m0);
        let var = |m: f64| (m / 2.0).powi(2);
        let expected = (q_tot - 1.0).powi(2) + 0.5 * (var(m0) + var(m1));

        let report = learner.compute_loss(&[&ep]).unwrap();
        assert!((report.loss - expected).abs() < 1e-14, "{} vs {expected}", report.loss);
    }

    #[test]
    fn target_changes_only_at_copy_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut learner = Learner::new(Method::VbcQmix, tiny_config(0.1), 2, 3, 2, 4, &mut rng).unwrap();
        let ep = random_episode(&mut rng, 2, 3, 4, 3);
        let mut snapshot = learner.target_params().to_checkpoint();
        for step in 1..=7 {
            learner.train_step(&[&ep]).unwrap();
            let now = learner.target_params().to_checkpoint();
            if step % 3 == 0 {
                assert_ne!(now, snapshot);
                assert_eq!(now, learner.params().to_checkpoint());
                snapshot = now;
            } else {
                assert_eq!(now, snapshot);
            }
        }
    }

    #[test]
    fn no_comm_methods_ignore_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut learner = Learner::new(Method::Qmix, tiny_config(5.0), 2, 3, 2, 4, &mut rng).unwrap();
        let ep = random_episode(&mut rng, 2, 3, 4, 3);
        let report = learner.compute_loss(&[&ep]).unwrap();
        assert_eq!(report.variance_loss, 0.0);
        let (fc1, _) = learner.agent().encoder_layers();
        assert!(learner.params.grad(fc1.weight_id()).as_slice().iter().all(|g| *g == 0.0));
        assert_eq!(learner.mixer().kind(), MixerKind::Qmix);
    }
}
