use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grid::{global_state, observe, sample_cells, Action, Pos};
use super::{check_actions, EnvKind, Environment, GridConfig, Reset, StepInfo, StepResult};
use crate::error::{Error, Result};

/// Agents spread over landmarks; the team is charged for the distance from
/// each agent to its nearest landmark and for every pair sharing a cell.
#[derive(Debug, Clone)]
pub struct CoopNav {
    config: GridConfig,
    agents: Vec<Pos>,
    landmarks: Vec<Pos>,
    last_actions: Vec<Option<Action>>,
    t: usize,
    done: bool,
}

impl CoopNav {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let mut env = Self {
            agents: Vec::new(),
            landmarks: Vec::new(),
            last_actions: vec![None; config.n_agents],
            t: 0,
            done: true,
            config,
        };
        env.reset(env.config.seed)?;
        Ok(env)
    }

    /// Starts an episode from explicit positions.
    pub fn from_layout(config: GridConfig, agents: Vec<Pos>, landmarks: Vec<Pos>) -> Result<Self> {
        let config = GridConfig {
            n_agents: agents.len(),
            n_targets: landmarks.len(),
            ..config
        };
        config.validate()?;
        if agents.iter().chain(&landmarks).any(|p| !p.in_bounds(&config)) {
            return Err(Error::InvalidConfig("layout position outside the grid".into()));
        }
        Ok(Self {
            last_actions: vec![None; agents.len()],
            agents,
            landmarks,
            t: 0,
            done: false,
            config,
        })
    }

    pub fn agents(&self) -> &[Pos] {
        &self.agents
    }

    pub fn landmarks(&self) -> &[Pos] {
        &self.landmarks
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        let alive = vec![true; self.landmarks.len()];
        (0..self.agents.len())
            .map(|i| observe(&self.config, &self.agents, &self.landmarks, &alive, i))
            .collect()
    }

    pub fn state(&self) -> Vec<f64> {
        let alive = vec![true; self.landmarks.len()];
        global_state(&self.config, &self.agents, &self.last_actions, &self.landmarks, &alive)
    }

    fn nearest_landmark(&self, p: Pos) -> i64 {
        self.landmarks.iter().map(|l| p.manhattan(*l)).min().unwrap_or(0)
    }

    fn collisions(&self) -> usize {
        let mut count = 0;
        for i in 0..self.agents.len() {
            for j in i + 1..self.agents.len() {
                if self.agents[i] == self.agents[j] {
                    count += 1;
                }
            }
        }
        count
    }
}

impl Environment for CoopNav {
    fn kind(&self) -> EnvKind {
        EnvKind::CoopNav
    }

    fn config(&self) -> &GridConfig {
        &self.config
    }

    fn reset(&mut self, seed: u64) -> Result<Reset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.landmarks = sample_cells(&self.config, self.config.n_targets, &mut rng);
        self.agents = sample_cells(&self.config, self.config.n_agents, &mut rng);
        self.last_actions = vec![None; self.config.n_agents];
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
        for (p, &a) in self.agents.iter_mut().zip(&actions) {
            *p = p.step(a, &self.config);
        }
        self.last_actions = actions.into_iter().map(Some).collect();
        self.t += 1;

        let distances: Vec<f64> = self.agents.iter().map(|p| self.nearest_landmark(*p) as f64).collect();
        let collisions = self.collisions();
        let scale = (self.config.width + self.config.height) as f64;
        let reward = -distances.iter().sum::<f64>() / scale - self.config.collision_penalty * collisions as f64;
        self.done = self.t >= self.config.max_steps;
        Ok(StepResult {
            observations: self.observations(),
            state: self.state(),
            reward,
            done: self.done,
            terminal: false,
            info: StepInfo {
                distances,
                collisions,
                captures: 0,
            },
        })
    }
}
