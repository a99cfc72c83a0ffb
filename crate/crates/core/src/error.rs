use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("problem has no tasks")]
    EmptyProblem,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("task {task}: logistic labels must be -1 or +1 (row {row} has {value})")]
    BadLabels { task: usize, row: usize, value: f64 },

    #[error("invalid membership: {0}")]
    InvalidMembership(String),

    #[error("invalid hyper-parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{rows} rows cannot be split into {folds} folds")]
    TooFewRows { rows: usize, folds: usize },

    #[error("cluster {cluster} received no pure task")]
    EmptyCluster { cluster: usize },

    #[error("spectral basis restricted to pure tasks is singular")]
    SingularBasis,

    #[error("matrix has rank below {k}")]
    RankDeficient { k: usize },

    #[error("only {remaining} tasks left after outlier removal, need at least {k}")]
    AllOutliers { remaining: usize, k: usize },

    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("{path}: line {line}, column {column}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("ree/mcc requested without ground truth")]
    MissingTruth,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Errors caused by numerics rather than by the input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::SingularBasis
                | Error::RankDeficient { .. }
                | Error::EmptyCluster { .. }
                | Error::AllOutliers { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
