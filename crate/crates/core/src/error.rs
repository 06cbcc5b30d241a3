//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]. Each variant
//! carries enough context to diagnose the failure without a debugger, and
//! [`Error::code`] exposes a stable machine-readable tag that the CLI maps
//! to exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is outside its documented domain.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A coordinate axis has zero extent, so normalization would divide by zero.
    #[error("degenerate axis: {0}")]
    DegenerateAxis(String),

    /// An operation needs more nodes than the graph provides.
    #[error("need at least {needed} nodes, got {got}")]
    InsufficientNodes { needed: usize, got: usize },

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A computation produced NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An internal invariant was violated; indicates a bug in the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file failed to parse. `line` is 1-based; 0 means the location is
    /// not attributable to a single line.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    /// A versioned file has a version this build does not understand.
    #[error("unsupported version {found:?}, expected {expected:?}")]
    UnsupportedVersion { expected: String, found: String },

    /// A class has too few examples to split into train/val/test.
    #[error("class {class:?} has {count} examples, need at least {needed}")]
    InsufficientClass {
        class: String,
        count: usize,
        needed: usize,
    },

    /// The synthetic generator could not place target and shadow disjointly.
    #[error("could not place target and shadow after {attempts} attempts")]
    Placement { attempts: usize },

    /// A closure expected to be deterministic returned different values on
    /// repeated evaluation.
    #[error("non-deterministic evaluation: repeated runs disagree")]
    NonDeterministic,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// Image decoding failed (delegated decoder, e.g. PNG).
    #[error("image decode: {0}")]
    Image(String),
}

impl Error {
    /// Stable machine-readable tag for this error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "config",
            Error::DegenerateAxis(_) => "degenerate-axis",
            Error::InsufficientNodes { .. } => "insufficient-nodes",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::UnsupportedVersion { .. } => "version",
            Error::InsufficientClass { .. } => "insufficient-class",
            Error::Placement { .. } => "placement",
            Error::NonDeterministic => "non-deterministic",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
