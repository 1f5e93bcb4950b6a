//! Error type shared by every module in the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensors, the tape, synthesis, training and I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A kernel or constructor received tensors of incompatible shapes.
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },
    /// A kernel produced a non-finite value; `node` identifies the tape node.
    NonFinite { op: &'static str, node: usize },
    /// Backward was requested from a node that is not a scalar.
    NonScalarLoss { dims: Vec<usize> },
    /// A gradient fed to the optimizer was non-finite.
    BadGradient { param: String },
    /// An argument was outside its documented domain.
    InvalidArgument { context: String },
    /// A required input set was empty.
    EmptyInput { context: String },
    /// Malformed on-disk data: bad magic, truncation, shape disagreement.
    Format { path: String, message: String },
    /// Underlying I/O failure.
    Io { path: String, message: String },
    /// A run configuration could not be parsed or validated.
    Config { message: String },
    /// A declared pipeline contract was violated (frozen weights mutated,
    /// corrupted image in a normal-only corpus, missing stage-1 checkpoint).
    Contract { message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(f, "shape mismatch in {context}: expected {expected}, got {got}"),
            Error::NonFinite { op, node } => {
                write!(f, "non-finite value produced by `{op}` at node {node}")
            }
            Error::NonScalarLoss { dims } => {
                write!(f, "backward requires a scalar loss, got dims {dims:?}")
            }
            Error::BadGradient { param } => {
                write!(f, "non-finite gradient for parameter `{param}`; step aborted")
            }
            Error::InvalidArgument { context } => write!(f, "invalid argument: {context}"),
            Error::EmptyInput { context } => write!(f, "empty input: {context}"),
            Error::Format { path, message } => write!(f, "bad file format ({path}): {message}"),
            Error::Io { path, message } => write!(f, "i/o error ({path}): {message}"),
            Error::Config { message } => write!(f, "config error: {message}"),
            Error::Contract { message } => write!(f, "contract violation: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 contract, 4 I/O and
    /// format errors, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Contract { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            _ => 1,
        }
    }
}
