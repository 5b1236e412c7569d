//! Continuing-task reinforcement learning toolkit.
//!
//! Environments never terminate; resets are ordinary (possibly penalised)
//! transitions. Agents optionally center their TD errors with an estimate of
//! the reward rate. Exact tabular solvers provide the oracles the learning
//! code is checked against.

pub mod agents;
pub mod centering;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mdp;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod wrappers;

pub use error::{Error, Result};
