//! Experiment driver for p-mean policy portfolios: configuration, run orchestration, result
//! files and per-group breakdowns.

pub mod breakdown;
pub mod config;
pub mod pipeline;

pub use config::RunConfig;
pub use pipeline::{exit_code, run, RunManifest};
