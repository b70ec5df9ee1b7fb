//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes:
//! configuration/input problems (exit 2), runtime/training failures
//! (exit 3), and verification failures (exit 4).

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Shape or rank mismatch between tensors.
    Dimension(String),
    /// A parameter value outside its documented domain (p < 1, eps <= 0, ...).
    Parameter(String),
    /// A computation produced a non-finite value.
    Numeric { context: String, magnitude: f64 },
    /// Invalid model or run configuration.
    Config(String),
    /// Invalid runtime input (token out of range, corpus too short, ...).
    Input(String),
    /// Filesystem error.
    Io(std::io::Error),
    /// Malformed file contents (checkpoint, config, CSV).
    Format(String),
    /// Training aborted on a non-finite loss.
    TrainingAbort {
        step: usize,
        mechanism: String,
        max_abs_grad: f64,
    },
    /// A verification command found results outside tolerance.
    Verification(String),
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Numeric { context, magnitude } => {
                write!(f, "numeric error: {context} (offending magnitude {magnitude:e})")
            }
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::TrainingAbort {
                step,
                mechanism,
                max_abs_grad,
            } => write!(
                f,
                "training aborted at step {step} (mechanism {mechanism}, max |grad| {max_abs_grad:e}): non-finite loss"
            ),
            Error::Verification(m) => write!(f, "verification failure: {m}"),
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
