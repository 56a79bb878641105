use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("backward called on `{layer}` without a recorded forward pass")]
    BackwardWithoutForward { layer: String },

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("action {action} out of range for agent {agent} (n_actions = {n_actions})")]
    InvalidAction {
        agent: usize,
        action: usize,
        n_actions: usize,
    },

    #[error("environment error: {0}")]
    Environment(String),

    #[error("perturbation bound violated: |u| = {value} > G = {bound}")]
    PerturbationBound { value: f64, bound: f64 },

    #[error("training diverged at episode {episode}: loss {loss}")]
    Diverged {
        episode: usize,
        loss: f64,
        checkpoint: Box<crate::numerics::Checkpoint>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
