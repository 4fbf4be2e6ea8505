//! Error type shared by all core modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// A forward op produced a NaN or infinity from finite inputs.
    NonFinite {
        op: &'static str,
    },
    /// Invalid argument value (out of range, wrong variant, ...).
    InvalidArg {
        what: &'static str,
        detail: String,
    },
    /// Tape misuse: double backward, non-scalar loss, tensor from another tape.
    Tape {
        detail: String,
    },
    /// Configuration rejected by validation. `field` names the offending entry.
    Config {
        field: String,
        detail: String,
    },
    /// Data-level problem (bad ground truth, empty cloud where one is required).
    Data {
        detail: String,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: String) -> Self {
        Error::Shape { op, detail }
    }

    pub fn shape_2(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape {
            op,
            detail: alloc::format!("incompatible shapes {a:?} and {b:?}"),
        }
    }

    pub fn non_finite(op: &'static str) -> Self {
        Error::NonFinite { op }
    }

    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArg {
            what,
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn data(detail: impl Into<String>) -> Self {
        Error::Data {
            detail: detail.into(),
        }
    }

    pub fn tape(detail: impl Into<String>) -> Self {
        Error::Tape {
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: {detail}"),
            Error::NonFinite { op } => {
                write!(f, "{op}: produced non-finite values from finite inputs")
            }
            Error::InvalidArg { what, detail } => write!(f, "invalid {what}: {detail}"),
            Error::Tape { detail } => write!(f, "tape: {detail}"),
            Error::Config { field, detail } => write!(f, "config field `{field}`: {detail}"),
            Error::Data { detail } => write!(f, "data: {detail}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

/// Formats a shape for error messages without pulling in Debug on slices everywhere.
pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| alloc::format!("{d}")).collect();
    alloc::format!("[{}]", parts.join(", "))
}
