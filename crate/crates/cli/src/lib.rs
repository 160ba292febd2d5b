// SPDX-License-Identifier: Apache-2.0

//! Experiment runner behind the `aoi` binary.

pub mod commands;
pub mod config;
pub mod experiment;

use aoi_core::decoupled::DecoupledError;
use aoi_core::dp::DpError;
use aoi_core::sim::SimError;
use aoi_core::structure::StructureError;
use aoi_core::{CostError, PolicyError};
use thiserror::Error;

pub use config::{ExperimentConfig, PolicySpec};
pub use experiment::{run_experiment, ResultBundle, RunOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Capacity(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Capacity(_) => 3,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Usage(format!("json: {e}"))
    }
}

impl From<CostError> for CliError {
    fn from(e: CostError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<DecoupledError> for CliError {
    fn from(e: DecoupledError) -> Self {
        match e {
            DecoupledError::Convergence { .. } | DecoupledError::Truncation { .. } => Self::Capacity(e.to_string()),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<DpError> for CliError {
    fn from(e: DpError) -> Self {
        match e {
            DpError::Capacity { .. } => Self::Capacity(e.to_string()),
            DpError::Sim(s) => s.into(),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NonCyclic { .. } => Self::Capacity(e.to_string()),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Decoupled(d) => d.into(),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<StructureError> for CliError {
    fn from(e: StructureError) -> Self {
        match e {
            StructureError::Dp(d) => d.into(),
            StructureError::Sim(s) => s.into(),
            other => Self::Failed(other.to_string()),
        }
    }
}
