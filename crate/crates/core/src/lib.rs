pub mod adapt;
pub mod data;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod features;
pub mod kernel;
pub mod pipeline;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
