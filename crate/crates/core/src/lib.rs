//! Compositional score-based posterior estimation for simulation-based inference.

pub mod error;
pub mod evaluation;
pub mod nn;
pub mod oracles;
pub mod rng;
pub mod schedule;
pub mod samplers;
pub mod score_net;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
