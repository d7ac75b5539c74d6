use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("input is empty")]
    EmptyInput,

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("sparsity k = {k} is out of range 1..={dim}")]
    SparsityOutOfRange { k: usize, dim: usize },

    #[error("simplex level must be positive, got {0}")]
    NonPositiveLevel(f64),

    #[error("support set is empty")]
    EmptySupport,

    #[error("index {index} out of bounds for dimension {dim}")]
    IndexOutOfBounds { index: usize, dim: usize },

    #[error("support contains duplicate index {0}")]
    DuplicateIndex(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("enumeration needs {supports} supports, budget is {budget}")]
    BudgetExceeded { supports: u128, budget: u128 },

    #[error("matrix is not Hermitian (relative asymmetry {0:e})")]
    NotHermitian(f64),

    #[error("rank r = {r} is out of range 1..={dim}")]
    RankOutOfRange { r: usize, dim: usize },

    #[error("clean signal has zero energy")]
    ZeroSignal,

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("{what} exceeds cap: {value} > {cap}")]
    CapExceeded { what: &'static str, value: usize, cap: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Rejects empty and non-finite inputs.
pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index, value: values[index] }),
        None => Ok(()),
    }
}
