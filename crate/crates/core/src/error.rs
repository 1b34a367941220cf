use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:e}, largest {largest:e})")]
    NotPsd { eigenvalue: f64, largest: f64 },

    #[error("matrix is numerically zero")]
    ZeroMatrix,

    #[error("rank deficient: numerical rank {rank}, need {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged at iteration {iteration} (non-finite loss)")]
    Diverged { iteration: usize },

    #[error("activation cache does not belong to the current network parameters")]
    StaleCache,

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("malformed record: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::NotPsd { .. }
            | Error::ZeroMatrix
            | Error::RankDeficient { .. }
            | Error::Diverged { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
