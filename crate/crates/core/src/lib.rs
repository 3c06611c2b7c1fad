//! Active global localization in randomly generated 2D mazes.

pub mod anl;
pub mod baselines;
pub mod bayes;
pub mod error;
pub mod gridworld;
pub mod harness;
pub mod neuralnet;
pub mod perception;
pub mod rng;

pub use error::{Error, Result};
