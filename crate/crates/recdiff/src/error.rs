use std::fmt;

/// Errors surfaced by the recdiff pipeline.
///
/// The variants map onto the CLI exit-code classes: configuration problems,
/// data problems, and training divergence.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration value or combination.
    Config(String),
    /// Malformed, missing, or inconsistent input data.
    Data(String),
    /// Tensor shape mismatch in a recorded operation.
    Shape { op: &'static str, detail: String },
    /// Loss became non-finite during training.
    Divergence { epoch: usize },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::Divergence { epoch } => {
                write!(f, "training diverged: non-finite loss at epoch {epoch}")
            }
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code class for this error: 1 config, 2 data/io, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } => 1,
            Error::Data(_) | Error::Io(_) => 2,
            Error::Divergence { .. } => 3,
        }
    }
}
