//! Experiment plumbing around the core simulator: TOML configuration,
//! image datasets, binary checkpoints and the end-to-end transmission runner.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod pipeline;

pub use error::{HarnessError, Result};
