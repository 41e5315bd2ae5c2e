//! Deterministic simulator for serial federated learning with triple
//! shuffling, Shapley-based contribution auditing, gradient-inversion attack
//! evaluation and a communication cost model.

pub mod attack;
pub mod cli;
pub mod comms;
pub mod contribution;
pub mod data;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod shuffle;

pub use error::{Error, Result};
