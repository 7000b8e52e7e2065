//! Experiment orchestration for the `ratescale` simulator: configuration
//! files, figure recipes, sweeps with replication fan-out, and the data files
//! each subcommand writes.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;
pub mod recipes;
pub mod seeds;

use thiserror::Error;

pub use config::{ExperimentSpec, ModelSpec, RunBackend, SweepAxis};
pub use experiment::{run_experiment, ExperimentResult, PointResult, TrajectoryRow};
pub use recipes::Recipe;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Verification(_) => 1,
            CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ratescale::EngineError> for CliError {
    fn from(e: ratescale::EngineError) -> Self {
        match e {
            ratescale::EngineError::Config(msg) => CliError::Config(msg),
            ratescale::EngineError::Io(msg) => CliError::Io(msg),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<ratescale::CostError> for CliError {
    fn from(e: ratescale::CostError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ratescale::stats::StatsError> for CliError {
    fn from(e: ratescale::stats::StatsError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<ratescale::meanfield::MeanFieldError> for CliError {
    fn from(e: ratescale::meanfield::MeanFieldError) -> Self {
        match e {
            ratescale::meanfield::MeanFieldError::Domain(msg) => CliError::Config(msg),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<ratescale::coupling::CouplingError> for CliError {
    fn from(e: ratescale::coupling::CouplingError) -> Self {
        match e {
            ratescale::coupling::CouplingError::Config(msg) => CliError::Config(msg),
            other => CliError::Verification(other.to_string()),
        }
    }
}
