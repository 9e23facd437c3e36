use thiserror::Error;

/// Errors raised anywhere in the simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("non-numeric cell at (row {row}, column {column}): {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("non-positive price at (row {row}, asset {asset})")]
    NonPositivePrice { row: usize, asset: String },
    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid dimensions: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible target: {0}")]
    Infeasible(String),
    #[error("non-unitary operator (deviation {0:.3e})")]
    NonUnitary(f64),
    #[error("unknown register {0:?}")]
    UnknownRegister(String),
    #[error("qubit cap exceeded: {requested} qubits requested, cap is {cap}")]
    QubitCap { requested: usize, cap: usize },
    #[error("post-selection on null branch (probability {0:.3e})")]
    NullBranch(f64),
    #[error("rotation amplitude overflow: |value * delta| = {0}")]
    RotationOverflow(f64),
    #[error("data register occupied: query would not implement the oracle map")]
    RegisterOccupied,
    #[error("C too large for kappa: |C / lambda| = {0}")]
    InversionOverflow(f64),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
