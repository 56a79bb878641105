use serde::{Deserialize, Serialize};

use super::GridConfig;

pub const N_ACTIONS: usize = 5;

/// Per-entity slot: relative x, relative y, distance (all divided by the
/// sight range), then a one-hot of {agent, target}.
pub const ENTITY_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: i64,
    pub y: i64,
}

impl Pos {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Pos) -> i64 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn chebyshev(self, other: Pos) -> i64 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }

    pub fn in_bounds(self, cfg: &GridConfig) -> bool {
        (0..cfg.width as i64).contains(&self.x) && (0..cfg.height as i64).contains(&self.y)
    }

    /// Moves one cell, staying put at walls.
    pub fn step(self, action: Action, cfg: &GridConfig) -> Pos {
        let (dx, dy) = action.delta();
        let next = Pos::new(self.x + dx, self.y + dy);
        if next.in_bounds(cfg) {
            next
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Stay,
    North,
    South,
    East,
    West,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Stay, Action::North, Action::South, Action::East, Action::West];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// North decreases `y`.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Stay => (0, 0),
            Action::North => (0, -1),
            Action::South => (0, 1),
            Action::East => (1, 0),
            Action::West => (-1, 0),
        }
    }
}

pub fn observation_dim(cfg: &GridConfig) -> usize {
    ENTITY_FEATURES * (cfg.n_agents - 1 + cfg.n_targets) + 2 + cfg.n_agents
}

pub fn state_dim(cfg: &GridConfig) -> usize {
    cfg.n_agents * (2 + N_ACTIONS) + cfg.n_targets * 3
}

fn normalise(v: i64, extent: usize) -> f64 {
    if extent > 1 {
        v as f64 / (extent - 1) as f64
    } else {
        0.0
    }
}

fn push_entity(out: &mut Vec<f64>, me: Pos, other: Pos, is_agent: bool, visible: bool, sight: f64) {
    if visible {
        let dx = (other.x - me.x) as f64;
        let dy = (other.y - me.y) as f64;
        out.extend([
            dx / sight,
            dy / sight,
            dx.hypot(dy) / sight,
            f64::from(u8::from(is_agent)),
            f64::from(u8::from(!is_agent)),
        ]);
    } else {
        out.extend([0.0; ENTITY_FEATURES]);
    }
}

/// Local view of agent `i`: a slot for every other agent (in index order)
/// and every target, zeroed when outside sight or removed, then the agent's
/// own normalised position and id one-hot.
pub fn observe(cfg: &GridConfig, agents: &[Pos], targets: &[Pos], target_alive: &[bool], i: usize) -> Vec<f64> {
    let me = agents[i];
    let sight = cfg.sight as f64;
    let in_sight = |p: Pos| me.chebyshev(p) <= cfg.sight as i64;
    let mut out = Vec::with_capacity(observation_dim(cfg));
    for (j, &other) in agents.iter().enumerate() {
        if j != i {
            push_entity(&mut out, me, other, true, in_sight(other), sight);
        }
    }
    for (&target, &alive) in targets.iter().zip(target_alive) {
        push_entity(&mut out, me, target, false, alive && in_sight(target), sight);
    }
    out.push(normalise(me.x, cfg.width));
    out.push(normalise(me.y, cfg.height));
    out.extend((0..cfg.n_agents).map(|k| f64::from(u8::from(k == i))));
    out
}

/// Centralised state: agent positions, last-action one-hots, target
/// positions and target-present flags.
pub fn global_state(
    cfg: &GridConfig,
    agents: &[Pos],
    last_actions: &[Option<Action>],
    targets: &[Pos],
    target_alive: &[bool],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(state_dim(cfg));
    for p in agents {
        out.push(normalise(p.x, cfg.width));
        out.push(normalise(p.y, cfg.height));
    }
    for a in last_actions {
        out.extend((0..N_ACTIONS).map(|k| f64::from(u8::from(a.map(Action::index) == Some(k)))));
    }
    for (p, &alive) in targets.iter().zip(target_alive) {
        if alive {
            out.push(normalise(p.x, cfg.width));
            out.push(normalise(p.y, cfg.height));
        } else {
            out.extend([0.0, 0.0]);
        }
        out.push(f64::from(u8::from(alive)));
    }
    out
}

/// Distinct random cells, sampled without replacement.
pub(crate) fn sample_cells<R: rand::Rng + ?Sized>(cfg: &GridConfig, count: usize, rng: &mut R) -> Vec<Pos> {
    rand::seq::index::sample(rng, cfg.cells(), count)
        .into_iter()
        .map(|k| Pos::new((k % cfg.width) as i64, (k / cfg.width) as i64))
        .collect()
}
