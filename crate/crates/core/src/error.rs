use std::fmt;

/// Crate-wide error type. Every fallible operation returns one of these
/// with enough context to identify the offending call site.
#[derive(Debug)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// A length precondition failed (flat vectors, bias sizes, provenance).
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// A classification label outside `0..=classes`.
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
    /// Anything else rejected by an operation's preconditions.
    Invalid {
        context: &'static str,
        message: String,
    },
    /// A forward pass produced NaN or Inf.
    NonFinite {
        context: &'static str,
    },
    /// Malformed serialized data (tensors, checkpoints, datasets, configs).
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(context: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            context,
            message: message.into(),
        }
    }

    pub fn shape(
        context: &'static str,
        expected: impl fmt::Display,
        got: impl fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(
                f,
                "{context}: shape mismatch, expected {expected}, got {got}"
            ),
            Error::LengthMismatch {
                context,
                expected,
                got,
            } => write!(
                f,
                "{context}: length mismatch, expected {expected}, got {got}"
            ),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range 0..={classes}")
            }
            Error::Invalid { context, message } => write!(f, "{context}: {message}"),
            Error::NonFinite { context } => write!(f, "{context}: non-finite value produced"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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
