use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor engine, the data pipeline, and the tooling.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Tensor extents do not satisfy an operation's shape contract.
    Shape(String),
    /// A numeric precondition was violated (non-positive temperature,
    /// unnormalized distribution, unknown condition kind, ...).
    Domain(String),
    /// The computation tape was used out of order (double backward,
    /// tensors from a foreign tape).
    State(String),
    /// An on-disk container is structurally invalid (bad magic, truncation,
    /// missing section).
    Format(String),
    /// A file parsed fine but holds invalid values (NaN rows, out-of-range
    /// labels).
    Data(String),
    /// Scene generation could not satisfy its contract.
    Gen(String),
    /// Training aborted (typically a NaN loss).
    Train(String),
    /// Evaluation could not run (empty dataset, unloadable checkpoint).
    Eval(String),
    /// A configuration file contains unknown keys or unparsable values.
    Config(String),
    /// Command-line arguments are invalid.
    Usage(String),
    /// An underlying I/O operation failed.
    Io(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn gen(msg: impl Into<String>) -> Self {
        Error::Gen(msg.into())
    }
    pub fn train(msg: impl Into<String>) -> Self {
        Error::Train(msg.into())
    }
    pub fn eval(msg: impl Into<String>) -> Self {
        Error::Eval(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Gen(m) => write!(f, "generation error: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
            Error::Eval(m) => write!(f, "evaluation error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
