use thiserror::Error;

/// Failure classes. The CLI maps them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    Validation(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("property check failed: {0}")]
    Property(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Parse(_) => 1,
            Error::Solver(_) | Error::Precondition(_) | Error::Io(_) => 2,
            Error::Property(_) => 3,
        }
    }
}
