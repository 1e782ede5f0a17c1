//! Command implementations behind the `spkver` binary.

pub mod commands;
pub mod config;

pub use config::{ExperimentConfig, NetworkKind};
