//! Partially observable gridworld tasks: cooperative navigation and
//! predator-prey. Agents see only entities within a Chebyshev sight range.

mod coop_nav;
mod grid;
mod predator_prey;
mod trace;

pub use coop_nav::CoopNav;
pub use grid::{observation_dim, observe, state_dim, Action, Pos, ENTITY_FEATURES, N_ACTIONS};
pub use predator_prey::{PredatorPrey, CAPTURE_REWARD, STEP_PENALTY};
pub use trace::{read_trace, write_trace, TraceRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    CoopNav,
    PredatorPrey,
}

impl std::str::FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "coop-nav" | "cn" => Ok(Self::CoopNav),
            "predator-prey" | "pp" => Ok(Self::PredatorPrey),
            _ => Err(format!("unknown environment `{s}`")),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CoopNav => "coop-nav",
            Self::PredatorPrey => "predator-prey",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub n_agents: usize,
    /// Landmarks in cooperative navigation, prey in predator-prey.
    pub n_targets: usize,
    /// Chebyshev radius, inclusive.
    pub sight: usize,
    pub max_steps: usize,
    pub collision_penalty: f64,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            width: 7,
            height: 7,
            n_agents: 3,
            n_targets: 3,
            sight: 2,
            max_steps: 50,
            collision_penalty: 1.0,
            seed: 0,
        }
    }
}

impl GridConfig {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be at least 1x1".into());
        }
        if self.n_agents == 0 || self.n_agents > self.cells() {
            return bad(format!("{} agents do not fit a {} cell grid", self.n_agents, self.cells()));
        }
        if self.n_targets == 0 || self.n_targets > self.cells() {
            return bad(format!("{} targets do not fit a {} cell grid", self.n_targets, self.cells()));
        }
        if self.sight == 0 {
            return bad("sight range must be at least 1".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if !self.collision_penalty.is_finite() {
            return bad("collision penalty must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Per-agent Manhattan distance to the nearest target (nearest alive
    /// prey in predator-prey; 0 once none remain).
    pub distances: Vec<f64>,
    pub collisions: usize,
    pub captures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observations: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub reward: f64,
    /// Episode over, whether by task completion or time limit.
    pub done: bool,
    /// Episode ended by task completion rather than the time limit.
    pub terminal: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reset {
    pub observations: Vec<Vec<f64>>,
    pub state: Vec<f64>,
}

pub trait Environment: Send {
    fn kind(&self) -> EnvKind;
    fn config(&self) -> &GridConfig;
    fn reset(&mut self, seed: u64) -> Result<Reset>;
    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;
    /// Agents that may act and communicate.
    fn alive(&self) -> Vec<bool> {
        vec![true; self.config().n_agents]
    }

    fn n_agents(&self) -> usize {
        self.config().n_agents
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn obs_dim(&self) -> usize {
        observation_dim(self.config())
    }

    fn state_dim(&self) -> usize {
        state_dim(self.config())
    }
}

pub fn make(kind: EnvKind, config: GridConfig) -> Result<Box<dyn Environment>> {
    Ok(match kind {
        EnvKind::CoopNav => Box::new(CoopNav::new(config)?),
        EnvKind::PredatorPrey => Box::new(PredatorPrey::new(config)?),
    })
}

fn check_actions(actions: &[usize], n_agents: usize) -> Result<Vec<Action>> {
    if actions.len() != n_agents {
        return Err(Error::DimensionMismatch {
            context: "joint action",
            expected: n_agents,
            actual: actions.len(),
        });
    }
    actions
        .iter()
        .enumerate()
        .map(|(agent, &a)| {
            Action::from_index(a).ok_or(Error::InvalidAction {
                agent,
                action: a,
                n_actions: N_ACTIONS,
            })
        })
        .collect()
}
