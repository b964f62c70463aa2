//! Experiment configuration, orchestration and artifact output.

mod config;
mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    load_config, validate, AblationSpec, BiasSpec, ConfigError, ExperimentConfig, ExperimentKind, Overrides, Problem,
};
pub use run::{aggregate, run, seed_csv_name, verdict, MetricsRow, RunSummary, SeedSummary, Verdict, FINAL_EVALS};

/// Process exit status for a bad config.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit status for a failure while running.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(ConfigError),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("seed {seed}: {message}")]
    Runtime { seed: u64, message: String },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e)
    }
}
