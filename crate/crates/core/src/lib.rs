//! Task-aware selection of pretraining data by gradient-matching influence.
//!
//! The pipeline: ingest a candidate corpus and a labeled end-task dataset,
//! prefilter candidates with BM25 retrieval, warm up a small two-headed
//! model on the task data, score every candidate by the inner product of its
//! pretraining-loss gradient with task-loss gradients at anchor examples,
//! and keep the top scorers as the pretraining subset. Everything the fast
//! score approximates is also computed exactly (one-step loss deltas, a
//! damped-Hessian influence oracle, leave-one-out retraining) so the
//! approximation chain can be validated end to end.

pub mod corpus;
pub mod evaluation;
pub mod influence;
pub mod model;
pub mod retrieval;
pub mod selection;
pub mod synth;
pub mod util;

use thiserror::Error;

/// Errors across the pipeline, grouped by how the CLI reports them:
/// missing inputs (exit 2), validation failures (exit 3), numeric
/// failures such as divergence (exit 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingInput(_) => 2,
            Error::Validation(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io { .. } => 2,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
