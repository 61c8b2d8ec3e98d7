use thiserror::Error;

/// Errors produced by the tensor engine, the memory operators and the
/// file formats.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("rows are linearly dependent at index {index} (residual norm {residual:e})")]
    Dependent { index: usize, residual: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
