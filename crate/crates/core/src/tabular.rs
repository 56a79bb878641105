//! Tabular form of the variance-penalised Q update and an empirical check
//! of its convergence bound `‖Q^k − Q*‖∞ ≤ λ·N·G`.
//!
//! The variance-gradient term of the update is supplied by a
//! [`Perturbation`] source whose draws are bounded by `G`; every draw is
//! checked against that bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    /// `P(s'|s,a)` at `(s * n_actions + a) * n_states + s'`.
    transitions: Vec<f64>,
    /// `r(s,a)` at `s * n_actions + a`.
    rewards: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidConfig("MDP needs at least one state and action".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidConfig(format!("gamma {gamma} outside [0, 1)")));
        }
        check_dim("TabularMdp transitions", n_states * n_actions * n_states, transitions.len())?;
        check_dim("TabularMdp rewards", n_states * n_actions, rewards.len())?;
        for (k, row) in transitions.chunks_exact(n_states).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| *p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "transition row {k} is not a distribution (sum {sum})"
                )));
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("MDP reward".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            transitions,
            rewards,
        })
    }

    /// Dense random MDP: transition rows are normalised uniform draws,
    /// rewards uniform in `[0, 1)`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let row: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = row.iter().sum();
            transitions.extend(row.into_iter().map(|p| p / sum));
        }
        let rewards = (0..n_states * n_actions).map(|_| rng.gen::<f64>()).collect();
        Self::new(n_states, n_actions, gamma, transitions, rewards)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let k = (s * self.n_actions + a) * self.n_states;
        &self.transitions[k..k + self.n_states]
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let row = self.transition_row(s, a);
        for (next, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return next;
            }
        }
        self.n_states - 1
    }

    /// Same dynamics with every reward shifted by `-delta`.
    pub fn with_reward_shift(&self, delta: f64) -> Self {
        let mut shifted = self.clone();
        shifted.rewards.iter_mut().for_each(|r| *r -= delta);
        shifted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn max_row(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `‖self − other‖∞`
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn bellman(mdp: &TabularMdp, q: &QTable) -> QTable {
    let mut next = QTable::zeros(mdp.n_states, mdp.n_actions);
    let v: Vec<f64> = (0..mdp.n_states).map(|s| q.max_row(s)).collect();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let ev: f64 = mdp.transition_row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
            next.set(s, a, mdp.reward(s, a) + mdp.gamma * ev);
        }
    }
    next
}

/// Iterates the Bellman optimality operator until the sup-norm residual
/// drops below `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    loop {
        let next = bellman(mdp, &q);
        let residual = next.sup_distance(&q);
        q = next;
        if residual < tol {
            return Ok(q);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// One penalised update of entry `(s, a)`:
///
/// ```text
/// Q(s,a) += η·[r + γ·max_a' Q(s',a') − Q(s,a) − λ·Σ_i u_i]
/// ```
pub fn eq2_update(q: &mut QTable, sample: Sample, eta: f64, lambda: f64, perturbations: &[f64], gamma: f64) {
    let Sample {
        state: s,
        action: a,
        reward,
        next_state,
    } = sample;
    let target = reward + gamma * q.max_row(next_state);
    let penalty: f64 = lambda * perturbations.iter().sum::<f64>();
    let current = q.get(s, a);
    q.set(s, a, current + eta * (target - current - penalty));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationMode {
    Zero,
    /// Every term equals `+G`.
    Constant,
    /// Independent uniform draws in `[−G, G]`.
    Uniform,
    /// `±G`, signed to push `Q(s,a)` away from `Q*(s,a)`.
    AdversarialSign,
}

impl std::str::FromStr for PerturbationMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero" => Ok(Self::Zero),
            "constant" => Ok(Self::Constant),
            "uniform" => Ok(Self::Uniform),
            "adversarial-sign" | "adversarial" => Ok(Self::AdversarialSign),
            _ => Err(format!("unknown perturbation mode `{s}`")),
        }
    }
}

/// Bounded per-agent terms standing in for the variance gradient.
#[derive(Debug, Clone)]
pub struct Perturbation {
    mode: PerturbationMode,
    bound: f64,
    rng: ChaCha8Rng,
    max_seen: f64,
}

impl Perturbation {
    pub fn new(mode: PerturbationMode, bound: f64, seed: u64) -> Result<Self> {
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(Error::InvalidConfig(format!("perturbation bound {bound} invalid")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Ok(Self {
            mode,
            bound,
            rng,
            max_seen: 0.0,
        })
    }

    /// Fills `out` with one term per agent for the entry being updated.
    pub fn draw(&mut self, q_sa: f64, q_star_sa: f64, out: &mut [f64]) -> Result<()> {
        let g = self.bound;
        for u in out.iter_mut() {
            *u = match self.mode {
                PerturbationMode::Zero => 0.0,
                PerturbationMode::Constant => g,
                PerturbationMode::Uniform => {
                    if g > 0.0 {
                        self.rng.gen_range(-g..=g)
                    } else {
                        0.0
                    }
                }
                PerturbationMode::AdversarialSign => {
                    if q_sa >= q_star_sa {
                        -g
                    } else {
                        g
                    }
                }
            };
            if u.abs() > g {
                return Err(Error::PerturbationBound {
                    value: u.abs(),
                    bound: g,
                });
            }
            self.max_seen = self.max_seen.max(u.abs());
        }
        Ok(())
    }

    /// Largest `|u|` drawn so far.
    pub fn max_seen(&self) -> f64 {
        self.max_seen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Config {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub n_agents: usize,
    pub bound_g: f64,
    pub mode: PerturbationMode,
    pub updates: usize,
    pub seed: u64,
    pub slack: f64,
    /// Step size `η = (1 + visits(s,a))^(−lr_exponent)`; any exponent in
    /// `(0.5, 1]` satisfies `Σ η = ∞, Σ η² < ∞`.
    pub lr_exponent: f64,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self {
            n_states: 5,
            n_actions: 4,
            gamma: 0.9,
            lambda: 0.1,
            n_agents: 3,
            bound_g: 1.0,
            mode: PerturbationMode::Uniform,
            updates: 500_000,
            seed: 0,
            slack: 0.05,
            lr_exponent: 0.7,
        }
    }
}

impl Theorem1Config {
    pub fn bound(&self) -> f64 {
        self.lambda * self.n_agents as f64 * self.bound_g
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr_exponent > 0.5 && self.lr_exponent <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_exponent {} outside (0.5, 1]",
                self.lr_exponent
            )));
        }
        if self.lambda < 0.0 || self.n_agents == 0 {
            return Err(Error::InvalidConfig("lambda must be ≥ 0 and n_agents ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub config: Theorem1Config,
    /// `‖Q^K − Q*‖∞`
    pub final_error: f64,
    /// `λ·N·G`
    pub bound: f64,
    pub slack: f64,
    pub pass: bool,
    /// Some `(s, a)` was never updated; `pass` is then false and the run
    /// says nothing about the bound.
    pub inconclusive: bool,
    pub min_visits: u64,
    /// `‖Q^K − Q*_shift‖∞` where `Q*_shift` solves the MDP with rewards
    /// shifted by `−λ·N·G`.
    pub shifted_oracle_error: f64,
    pub max_perturbation: f64,
}

/// Result of running the penalised update on one MDP.
#[derive(Debug, Clone)]
pub struct LearningRun {
    pub q: QTable,
    pub visits: Vec<u64>,
    /// `‖Q^k − Q*‖∞` sampled every `trace_every` updates (empty if 0).
    pub error_trace: Vec<f64>,
    pub max_perturbation: f64,
}

/// Runs `cfg.updates` penalised updates with a uniform-random behaviour
/// policy and visit-count step sizes.
pub fn run_learning(mdp: &TabularMdp, q_star: &QTable, cfg: &Theorem1Config, trace_every: usize) -> Result<LearningRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut perturbation = Perturbation::new(cfg.mode, cfg.bound_g, cfg.seed)?;
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    let mut visits = vec![0u64; mdp.n_states * mdp.n_actions];
    let mut terms = vec![0.0; cfg.n_agents];
    let mut trace = Vec::new();
    let mut s = 0;
    for k in 0..cfg.updates {
        let a = rng.gen_range(0..mdp.n_actions);
        let next = mdp.sample_next(s, a, &mut rng);
        let idx = s * mdp.n_actions + a;
        let eta = (1.0 + visits[idx] as f64).powf(-cfg.lr_exponent);
        visits[idx] += 1;
        perturbation.draw(q.get(s, a), q_star.get(s, a), &mut terms)?;
        let sample = Sample {
            state: s,
            action: a,
            reward: mdp.reward(s, a),
            next_state: next,
        };
        eq2_update(&mut q, sample, eta, cfg.lambda, &terms, mdp.gamma);
        s = next;
        if trace_every > 0 && (k + 1) % trace_every == 0 {
            trace.push(q.sup_distance(q_star));
        }
    }
    Ok(LearningRun {
        q,
        visits,
        error_trace: trace,
        max_perturbation: perturbation.max_seen(),
    })
}

/// Generates a random MDP from `cfg.seed`, solves it by value iteration and
/// measures how far the penalised iterates end from `Q*`.
pub fn verify_theorem1(cfg: &Theorem1Config) -> Result<Theorem1Report> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mdp = TabularMdp::random(cfg.n_states, cfg.n_actions, cfg.gamma, &mut rng)?;
    verify_theorem1_on(&mdp, cfg)
}

pub fn verify_theorem1_on(mdp: &TabularMdp, cfg: &Theorem1Config) -> Result<Theorem1Report> {
    let q_star = value_iteration(mdp, 1e-12)?;
    let q_shift = value_iteration(&mdp.with_reward_shift(cfg.bound()), 1e-12)?;
    let run = run_learning(mdp, &q_star, cfg, 0)?;
    let final_error = run.q.sup_distance(&q_star);
    let min_visits = run.visits.iter().copied().min().unwrap_or(0);
    let inconclusive = min_visits == 0;
    let bound = cfg.bound();
    Ok(Theorem1Report {
        config: cfg.clone(),
        final_error,
        bound,
        slack: cfg.slack,
        pass: !inconclusive && final_error <= bound + cfg.slack,
        inconclusive,
        min_visits,
        shifted_oracle_error: run.q.sup_distance(&q_shift),
        max_perturbation: run.max_perturbation,
    })
}
