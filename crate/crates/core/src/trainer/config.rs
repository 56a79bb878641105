use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::MixerKind;
use crate::protocol::CommConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    VbcVdn,
    VbcQmix,
    /// Full communication, no variance penalty.
    Fc,
    Vdn,
    Qmix,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::VbcVdn, Method::VbcQmix, Method::Fc, Method::Vdn, Method::Qmix];

    pub fn id(self) -> &'static str {
        match self {
            Method::VbcVdn => "vbc-vdn",
            Method::VbcQmix => "vbc-qmix",
            Method::Fc => "fc",
            Method::Vdn => "vdn",
            Method::Qmix => "qmix",
        }
    }

    pub fn mixer(self) -> MixerKind {
        match self {
            Method::VbcQmix | Method::Qmix => MixerKind::Qmix,
            _ => MixerKind::Vdn,
        }
    }

    pub fn uses_messages(self) -> bool {
        matches!(self, Method::VbcVdn | Method::VbcQmix | Method::Fc)
    }

    /// Variance-penalty weight actually applied during training.
    pub fn effective_lambda(self, lambda: f64) -> f64 {
        match self {
            Method::VbcVdn | Method::VbcQmix => lambda,
            _ => 0.0,
        }
    }

    /// Thresholds used at evaluation time; `None` when the method has no
    /// messages at all.
    pub fn eval_comm(self, comm: CommConfig) -> Option<CommConfig> {
        match self {
            Method::VbcVdn | Method::VbcQmix => Some(comm),
            Method::Fc => Some(CommConfig::FULL),
            Method::Vdn | Method::Qmix => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected vbc-vdn, vbc-qmix, fc, vdn or qmix)"))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Which action values drive exploration during training rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    /// ε-greedy over local values plus every other agent's message.
    Combined,
    /// ε-greedy over local values only.
    Local,
}

impl std::str::FromStr for Behavior {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "combined" => Ok(Self::Combined),
            "local" => Ok(Self::Local),
            _ => Err(format!("unknown behavior `{s}` (expected combined or local)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    /// Episodes per gradient step.
    pub batch_size: usize,
    /// Replay capacity in whole episodes.
    pub buffer_capacity: usize,
    /// Gradient steps between target-network copies.
    pub target_period: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Environment steps over which ε decays linearly.
    pub eps_horizon: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_hidden: usize,
    pub mixer_hidden: usize,
    /// Abort once the mean per-step loss of a batch exceeds this.
    pub divergence_threshold: f64,
    pub behavior: Behavior,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.1,
            lr: 5e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-5,
            batch_size: 32,
            buffer_capacity: 500,
            target_period: 200,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_horizon: 50_000,
            embed_dim: 32,
            hidden_dim: 32,
            encoder_hidden: 64,
            mixer_hidden: 32,
            divergence_threshold: 1e6,
            behavior: Behavior::Combined,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("lambda {} must be finite and ≥ 0", self.lambda));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.rms_alpha) || !(self.rms_eps > 0.0) {
            return fail("optimizer settings out of range".into());
        }
        for (name, eps) in [("eps_start", self.eps_start), ("eps_end", self.eps_end)] {
            if !(0.05..=1.0).contains(&eps) {
                return fail(format!("{name} {eps} outside [0.05, 1]"));
            }
        }
        if self.eps_end > self.eps_start {
            return fail("eps_end must not exceed eps_start".into());
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return fail(format!(
                "need 1 ≤ batch_size ({}) ≤ buffer_capacity ({})",
                self.batch_size, self.buffer_capacity
            ));
        }
        if self.target_period == 0 {
            return fail("target_period must be positive".into());
        }
        if [self.embed_dim, self.hidden_dim, self.encoder_hidden, self.mixer_hidden].contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if !(self.divergence_threshold > 0.0) {
            return fail("divergence_threshold must be positive".into());
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end` over `eps_horizon` steps.
    pub fn epsilon(&self, env_steps: usize) -> f64 {
        if self.eps_horizon == 0 || env_steps >= self.eps_horizon {
            return self.eps_end;
        }
        let frac = env_steps as f64 / self.eps_horizon as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}
