//! Experiment harness: configuration, checkpoints, metrics and the run modes
//! behind the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod run;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ExperimentConfig, Mode, Plan};
pub use metrics::{Provenance, Record};
pub use run::{account, calibrate, infer, load_dataset, resume, synth, train, ResumeOptions, RunOutcome, SynthOptions};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Optim(#[from] crate::optimizer::OptimError),
    #[error(transparent)]
    Accountant(#[from] crate::accountant::AccountantError),
    #[error(transparent)]
    Sampling(#[from] crate::sampling::SamplingError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
