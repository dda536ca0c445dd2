use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("reference error: {0}")]
    Reference(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
