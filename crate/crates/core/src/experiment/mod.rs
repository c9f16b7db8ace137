//! Experiment protocols shared by the command-line driver and the test
//! suites: leave-one-domain-out probing, change detection and recovery of
//! known factors on synthetic data.

mod config;
mod protocol;
mod report;

pub use config::{DatasetSpec, ExperimentConfig, ModelKind, Protocol};
pub use protocol::{
    build_splits, canm_scores, change_scores, derive_seed, lodo_scores, projection_rows,
    run_experiment, run_one, run_train_config, score_model, train_model, training_view, CanmScores,
    DomainScore, ExperimentOutput, LodoScores, RunOutput, Splits,
};
pub use report::{
    read_stamped_csv, write_stamped_csv, LossRow, MetricsReport, ParityRow, ProjectionRow,
    ScoreRow, SummaryRow,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::nested::ModelError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Csv { path: PathBuf, detail: String },
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ExperimentError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
