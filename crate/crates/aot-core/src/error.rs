use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    Shape(String),
    /// A hyper-parameter combination is invalid (heads not dividing C, even
    /// window size, zero layers, ...).
    Config(String),
    /// More object slots were requested than the identity bank can hold.
    Capacity { objects: usize, identities: usize },
    /// A label raster contains a value outside the declared object range.
    Mask(String),
    /// An operation was called before the state it needs exists (memory not
    /// initialized, missing block output, ...).
    State(String),
    /// A numeric invariant was violated (NaN/Inf produced, zero-norm row).
    Numeric(String),
    /// An attention row has no unmasked key to attend to.
    Degenerate(String),
    /// A tensor handle does not belong to the active tape, or the tape was
    /// misused (non-scalar loss, nested recording).
    Tape(String),
    /// File or directory level I/O failure.
    Io(std::io::Error),
    /// A file exists but its contents do not parse (bad magic, truncated
    /// payload, malformed key=value line).
    Parse(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Capacity { objects, identities } => write!(
                f,
                "capacity error: {objects} object slots exceed {identities} identities"
            ),
            Error::Mask(m) => write!(f, "mask error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Degenerate(m) => write!(f, "attention-degenerate error: {m}"),
            Error::Tape(m) => write!(f, "tape error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
