use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::{global_state, observe, sample_cells, Action, Pos};
use super::{check_actions, EnvKind, Environment, GridConfig, Reset, StepInfo, StepResult};
use crate::error::{Error, Result};

pub const CAPTURE_REWARD: f64 = 10.0;
pub const STEP_PENALTY: f64 = 0.05;

/// Predators (the learning agents) hunt randomly moving prey. A prey is
/// captured when at least two predators stand next to it.
#[derive(Debug, Clone)]
pub struct PredatorPrey {
    config: GridConfig,
    predators: Vec<Pos>,
    prey: Vec<Pos>,
    prey_alive: Vec<bool>,
    last_actions: Vec<Option<Action>>,
    rng: ChaCha8Rng,
    t: usize,
    done: bool,
}

impl PredatorPrey {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        if config.n_agents + config.n_targets > config.cells() {
            return Err(Error::InvalidConfig("predators and prey do not fit the grid".into()));
        }
        let mut env = Self {
            predators: Vec::new(),
            prey: Vec::new(),
            prey_alive: Vec::new(),
            last_actions: vec![None; config.n_agents],
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            t: 0,
            done: true,
            config,
        };
        env.reset(env.config.seed)?;
        Ok(env)
    }

    /// Starts an episode from explicit positions; `seed` drives prey moves.
    pub fn from_layout(config: GridConfig, predators: Vec<Pos>, prey: Vec<Pos>, seed: u64) -> Result<Self> {
        let config = GridConfig {
            n_agents: predators.len(),
            n_targets: prey.len(),
            ..config
        };
        config.validate()?;
        if predators.iter().chain(&prey).any(|p| !p.in_bounds(&config)) {
            return Err(Error::InvalidConfig("layout position outside the grid".into()));
        }
        Ok(Self {
            last_actions: vec![None; predators.len()],
            prey_alive: vec![true; prey.len()],
            predators,
            prey,
            rng: ChaCha8Rng::seed_from_u64(seed),
            t: 0,
            done: false,
            config,
        })
    }

    pub fn predators(&self) -> &[Pos] {
        &self.predators
    }

    pub fn prey(&self) -> &[Pos] {
        &self.prey
    }

    pub fn prey_alive(&self) -> &[bool] {
        &self.prey_alive
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.predators.len())
            .map(|i| observe(&self.config, &self.predators, &self.prey, &self.prey_alive, i))
            .collect()
    }

    pub fn state(&self) -> Vec<f64> {
        global_state(&self.config, &self.predators, &self.last_actions, &self.prey, &self.prey_alive)
    }

    fn adjacent_predators(&self, p: Pos) -> usize {
        self.predators.iter().filter(|q| q.manhattan(p) == 1).count()
    }

    fn move_prey(&mut self) {
        for k in 0..self.prey.len() {
            if !self.prey_alive[k] {
                continue;
            }
            let here = self.prey[k];
            let free: Vec<Pos> = Action::ALL
                .iter()
                .map(|&a| here.step(a, &self.config))
                .filter(|&p| {
                    p == here
                        || (!self.predators.contains(&p)
                            && !self
                                .prey
                                .iter()
                                .zip(&self.prey_alive)
                                .any(|(q, &alive)| alive && *q == p))
                })
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            self.prey[k] = free[self.rng.gen_range(0..free.len())];
        }
    }

    fn nearest_prey(&self, p: Pos) -> f64 {
        self.prey
            .iter()
            .zip(&self.prey_alive)
            .filter(|(_, &alive)| alive)
            .map(|(q, _)| p.manhattan(*q))
            .min()
            .unwrap_or(0) as f64
    }
}

impl Environment for PredatorPrey {
    fn kind(&self) -> EnvKind {
        EnvKind::PredatorPrey
    }

    fn config(&self) -> &GridConfig {
        &self.config
    }

    fn reset(&mut self, seed: u64) -> Result<Reset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = sample_cells(&self.config, self.config.n_agents + self.config.n_targets, &mut rng);
        let (predators, prey) = cells.split_at(self.config.n_agents);
        self.predators = predators.to_vec();
        self.prey = prey.to_vec();
        self.prey_alive = vec![true; self.prey.len()];
        self.last_actions = vec![None; self.config.n_agents];
        self.rng = rng;
        self.t = 0;
        self.done = false;
        Ok(Reset {
            observations: self.observations(),
            state: self.state(),
        })
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Environment("step called on a finished episode".into()));
        }
        let actions = check_actions(actions, self.config.n_agents)?;
        for (p, &a) in self.predators.iter_mut().zip(&actions) {
            *p = p.step(a, &self.config);
        }
        self.last_actions = actions.into_iter().map(Some).collect();
        self.t += 1;

        let mut captures = 0;
        for k in 0..self.prey.len() {
            if self.prey_alive[k] && self.adjacent_predators(self.prey[k]) >= 2 {
                self.prey_alive[k] = false;
                captures += 1;
            }
        }
        let reward = CAPTURE_REWARD * captures as f64 - STEP_PENALTY;
        self.move_prey();

        let terminal = self.prey_alive.iter().all(|a| !a);
        self.done = terminal || self.t >= self.config.max_steps;
        let distances = self.predators.iter().map(|p| self.nearest_prey(*p)).collect();
        Ok(StepResult {
            observations: self.observations(),
            state: self.state(),
            reward,
            done: self.done,
            terminal,
            info: StepInfo {
                distances,
                collisions: 0,
                captures,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(w: usize, h: usize, max_steps: usize) -> GridConfig {
        GridConfig {
            width: w,
            height: h,
            max_steps,
            ..GridConfig::default()
        }
    }

    #[test]
    fn no_adjacent_predator_costs_step_penalty() {
        let mut env =
            PredatorPrey::from_layout(small(7, 7, 10), vec![Pos::new(0, 0), Pos::new(6, 6)], vec![Pos::new(3, 3)], 0)
                .unwrap();
        let r = env.step(&[0, 0]).unwrap();
        assert_eq!(r.reward, -STEP_PENALTY);
        assert_eq!(r.info.captures, 0);
    }

    #[test]
    fn flanked_prey_is_captured() {
        let mut env =
            PredatorPrey::from_layout(small(7, 7, 10), vec![Pos::new(1, 3), Pos::new(5, 3)], vec![Pos::new(3, 3)], 0)
                .unwrap();
        let r = env.step(&[Action::East.index(), Action::West.index()]).unwrap();
        assert_eq!(r.info.captures, 1);
        assert!((r.reward - (CAPTURE_REWARD - STEP_PENALTY)).abs() < 1e-15);
        assert!(r.done && r.terminal);
        assert_eq!(env.prey_alive(), &[false]);
    }

    #[test]
    fn one_predator_never_captures() {
        // every start, every 3-step action sequence, several prey streams
        let cfg = small(3, 3, 3);
        let cells: Vec<Pos> = (0..9).map(|k| Pos::new(k % 3, k / 3)).collect();
        let mut runs = 0;
        for &pred in &cells {
            for &prey in cells.iter().filter(|&&c| c != pred) {
                for seq in 0..125usize {
                    let acts = [seq % 5, (seq / 5) % 5, seq / 25];
                    for seed in 0..2 {
                        let mut env = PredatorPrey::from_layout(cfg.clone(), vec![pred], vec![prey], seed).unwrap();
                        for &a in &acts {
                            let r = env.step(&[a]).unwrap();
                            assert_eq!(r.info.captures, 0);
                        }
                        runs += 1;
                    }
                }
            }
        }
        assert_eq!(runs, 9 * 8 * 125 * 2);
    }

    #[test]
    fn prey_avoid_occupied_cells() {
        let mut env = PredatorPrey::new(small(5, 5, 200)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let acts: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
            let r = env.step(&acts).unwrap();
            for (k, p) in env.prey().iter().enumerate() {
                assert!(p.in_bounds(env.config()));
                if env.prey_alive()[k] {
                    assert!(!env.predators().contains(p));
                }
            }
            if r.done {
                break;
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = GridConfig {
            n_targets: 2,
            ..GridConfig::default()
        };
        let mut a = PredatorPrey::new(cfg.clone()).unwrap();
        let mut b = PredatorPrey::new(cfg).unwrap();
        assert_eq!(a.reset(5).unwrap(), b.reset(5).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let acts: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
            let (ra, rb) = (a.step(&acts).unwrap(), b.step(&acts).unwrap());
            assert_eq!(ra, rb);
            if ra.done {
                break;
            }
        }
    }
}
