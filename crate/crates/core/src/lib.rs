pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ising;
pub mod policies;
pub mod pipeline;
pub mod rl;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
