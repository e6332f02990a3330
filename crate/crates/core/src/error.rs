use alloc::string::String;
use core::fmt;

/// Failure kinds surfaced by the core crate.
///
/// `Display` renders a stable, lower-case category prefix ("shape error",
/// "numeric error", ...) followed by detail; the CLI relies on that prefix
/// for its single-line error output.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    Shape { op: &'static str, detail: String },
    Numeric { op: &'static str, detail: String },
    Contract(String),
    Determinism(String),
    DegenerateModel(String),
    Data(String),
    Divergence { step: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    /// Short category name, used as the machine-readable error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape error",
            Error::Numeric { .. } => "numeric error",
            Error::Contract(_) => "contract error",
            Error::Determinism(_) => "determinism error",
            Error::DegenerateModel(_) => "degenerate model error",
            Error::Data(_) => "data error",
            Error::Divergence { .. } => "numeric divergence",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Numeric { op, detail } => write!(f, "numeric error in {op}: {detail}"),
            Error::Contract(d) => write!(f, "contract error: {d}"),
            Error::Determinism(d) => write!(f, "determinism error: {d}"),
            Error::DegenerateModel(d) => write!(f, "degenerate model error: {d}"),
            Error::Data(d) => write!(f, "data error: {d}"),
            Error::Divergence { step, detail } => {
                write!(f, "numeric divergence at step {step}: {detail}")
            }
        }
    }
}

impl core::error::Error for Error {}
