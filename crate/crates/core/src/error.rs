use std::path::PathBuf;

use thiserror::Error;

use crate::sharding::ChunkId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or call argument is out of its valid domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// The input cannot be scheduled under the stated constraints.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// No worker can take a unit without exceeding the memory cap.
    #[error(
        "infeasible: no worker can host unit {unit_id} ({memory} tokens) under memory cap {cap}"
    )]
    NoEligibleWorker {
        unit_id: usize,
        memory: f64,
        cap: f64,
    },

    /// A plan moves a payload from a worker that does not hold it, or leaves
    /// a dependency undelivered.
    #[error("inconsistent plan: {0}")]
    Consistency(String),

    #[error("chunk {0} is not part of this placement")]
    UnknownChunk(ChunkId),

    /// An internal invariant failed; this indicates a bug.
    #[error("internal error: {0}")]
    Logic(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by scheduling constraints rather than bad input.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible(_) | Error::NoEligibleWorker { .. })
    }
}
