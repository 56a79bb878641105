//! Dense linear algebra and differentiable layers with hand-written
//! backward passes.

mod dense;
pub mod gradcheck;
mod gru;
mod matrix;
mod params;

pub use dense::{Activation, DenseLayer, LEAKY_SLOPE};
pub use gru::{sigmoid, GruCell, GruWeights};
pub use matrix::{dot, Matrix};
pub use params::{Checkpoint, Param, ParamBlock, ParamId, ParamRecord, CHECKPOINT_VERSION};
