//! MIMO symbol detection by Monte Carlo tree search, plain and guided by a
//! self-play actor-critic agent, together with exact ML and linear MMSE
//! baselines and a Monte-Carlo SER/runtime harness.

pub mod agent;
pub mod baseline;
pub mod bench;
pub mod drl_mcts;
pub mod error;
pub mod mcts;
pub mod nn;
pub mod signal;

pub use error::{Error, Result};
