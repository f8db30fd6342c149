use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("argument {value} outside the domain [0, 1] of {op}")]
    OutOfDomain { op: &'static str, value: f64 },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("integer overflow computing {0}")]
    Overflow(String),

    #[error("gadget width N must be at least 2 (got {0})")]
    WidthTooSmall(usize),

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("n = {n} exceeds the permutation-sum limit of {limit}")]
    TooManyColumns { n: usize, limit: usize },

    #[error("polynomial is not column-symmetric: swapping columns {0} and {1} changes it")]
    NotSymmetric(usize, usize),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("input layout violation: {0}")]
    Layout(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
