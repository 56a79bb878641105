pub mod agent;
pub mod env;
pub mod error;
pub mod harness;
pub mod mixer;
pub mod numerics;
pub mod protocol;
mod serde_ext;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};
pub use serde_ext::parse as parse_threshold;
