pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod nn;
pub mod ppo;
pub mod refine;
pub mod semantics;
pub mod sensing;
pub mod sim;

pub use error::{Error, Result};
