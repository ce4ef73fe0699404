//! Experiment driver: configuration files, built-in experiments and the
//! pipeline behind the `collogp` command.

pub mod config;
pub mod experiments;
pub mod io;
pub mod run;

pub use config::{ExperimentConfig, Method, Overrides};
pub use run::{evaluate, reproduce, run, run_on, ModelFile, RunOutput, RunResult, Summary};
