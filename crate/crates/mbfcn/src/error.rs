use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or incompatible shapes.
    #[error("config error: {0}")]
    Config(String),
    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Operation called in the wrong order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),
    /// Invalid input data (degenerate boxes, bad pixel payloads, ...).
    #[error("input error: {0}")]
    Input(String),
    /// Text-format parse failure with source location.
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    /// Binary-format failure (bad magic, truncation, ...).
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code the CLI maps this error to: 1 for input/config problems,
    /// 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Input(_)
            | Error::Parse { .. }
            | Error::Format(_)
            | Error::Io(_) => 1,
            Error::Numeric(_) | Error::State(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
