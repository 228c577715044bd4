//! Experiment driver: benchmark synthesis, dictionary learning, source training,
//! evaluation with or without test-time adaptation, and the K ablation.
//!
//! Every command writes into a directory under the output root together with the
//! resolved `config.toml` and a `provenance.json` holding content hashes and seeds.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use artifacts::Layout;
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
