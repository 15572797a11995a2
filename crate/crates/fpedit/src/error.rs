//! Crate-wide error type and the exit-code policy used by the CLI.

/// All fallible operations in this crate return this error.
///
/// The variants deliberately mirror how the CLI reports failures:
/// anything wrong with inputs (arguments, files, shapes, tokens) is an
/// input error, anything wrong with the arithmetic (divergence, singular
/// systems, non-convergence) is a numerical failure, and misuse of an
/// API (e.g. asking a tape for the gradient of a slot it never recorded)
/// is a usage error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The caller handed us something we reject by contract: bad shapes,
    /// empty text, out-of-range ids, missing files with a known cause.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A file or stream did not match the expected on-disk format.
    #[error("parse error: {0}")]
    Parse(String),

    /// An API was called in a way that is never valid, independent of data.
    #[error("usage error: {0}")]
    Usage(String),

    /// The arithmetic itself failed: divergence, ill-conditioning,
    /// non-convergence, or non-finite values where finite ones are required.
    #[error("numerical failure: {msg}")]
    Numerical {
        msg: String,
        /// Condition-number estimate when the failure came from a solve.
        condition: Option<f64>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical { msg: msg.into(), condition: None }
    }

    /// Process exit code the CLI maps this error to. Verification
    /// failures are not errors (commands report them and exit 3); the
    /// mapping here only covers genuine faults.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidInput(_) | Error::Parse(_) | Error::Usage(_) | Error::Io(_) => 2,
            Error::Numerical { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
