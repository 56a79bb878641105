use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observations: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub actions: Vec<usize>,
    pub reward: f64,
    /// True terminal step; time-limit truncation is not terminal.
    pub done: bool,
}

/// A complete episode plus the observation that followed its last step,
/// which the target network needs for bootstrapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<Transition>,
    pub final_observations: Vec<Vec<f64>>,
    pub final_state: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Ring buffer of whole episodes.
#[derive(Debug, Clone)]
pub struct EpisodeBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl EpisodeBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            episodes: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn push(&mut self, episode: Episode) -> Result<()> {
        if episode.is_empty() {
            return Err(Error::InvalidConfig("cannot store an empty episode".into()));
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// `batch` distinct episodes, uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Episode>> {
        if batch == 0 || batch > self.episodes.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot sample {batch} episodes from a buffer of {}",
                self.episodes.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.episodes.len(), batch)
            .into_iter()
            .map(|k| &self.episodes[k])
            .collect())
    }
}
