//! Experiment front end for `lengen-core`: configs and presets, run directories with
//! replayable manifests, checkpoint evaluation, failure reports and sweeps.

use std::path::PathBuf;

use thiserror::Error;

pub mod config;
pub mod run;
pub mod sweep;

pub use config::{ConfigError, ExperimentConfig, Precision, Resolved, PRESETS};
pub use run::{cmd_eval, cmd_gen, cmd_report, cmd_train, run_experiment, EvalOutput, EvalRequest, RunOutput};
pub use sweep::{cmd_sweep, SweepConfig, SweepOutput};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] lengen_core::trainer::TrainError),
    #[error(transparent)]
    Task(#[from] lengen_core::taskgen::TaskError),
    #[error(transparent)]
    Analysis(#[from] lengen_core::analysis::AnalysisError),
    #[error(transparent)]
    Checkpoint(#[from] lengen_core::model::CheckpointError),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("sweep: {0}")]
    Sweep(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}
