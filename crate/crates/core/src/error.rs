use alloc::string::String;
use core::fmt;

/// Crate-wide error type.
///
/// Variants mirror the failure classes of the toolkit: shape disagreements,
/// invalid layer/noise configuration, missing state, out-of-range arguments,
/// misuse of an API, and non-finite numerics surfaced during training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes disagree; the message names the offending axes.
    Dim(String),
    /// A structurally invalid configuration (kernel/stride mismatch, bad scale, ...).
    Config(String),
    /// Required state is missing or degenerate (uninitialized running stats, batch of 1).
    State(String),
    /// An argument fell outside its documented range.
    Range(String),
    /// API misuse (e.g. backward from a non-scalar).
    Usage(String),
    /// A NaN or infinity appeared where finite values are required.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Range(m) => write!(f, "range error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
