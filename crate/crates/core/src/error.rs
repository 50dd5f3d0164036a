use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by ingestion, fitting, and band construction.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as {expected}")]
    Parse {
        row: usize,
        column: String,
        value: String,
        expected: &'static str,
    },

    #[error("row {row} has {got} fields, header has {expected}")]
    RowWidth {
        row: usize,
        expected: usize,
        got: usize,
    },

    #[error("label not in {{0,1}}: found {0}")]
    NonBinaryLabel(u32),

    #[error("unknown label {0}")]
    UnknownLabel(u32),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("oracle probability {0} outside [0,1]")]
    OracleOutOfRange(f64),

    #[error("instance {0} has no oracle probability")]
    MissingOracle(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("test set needs at least one instance of each class")]
    SingleClassTest,

    #[error("degenerate design: all features are constant")]
    DegenerateDesign,

    #[error("covariance matrix is not positive semidefinite")]
    NotPositiveSemidefinite,

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("{0}")]
    InvalidParameter(String),

    #[error("lambda grids differ between bands")]
    GridMismatch,

    #[error("total weight is zero")]
    ZeroWeight,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter("alpha must be in (0,1)".into()))
    }
}
