use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible; carries both shapes and the op name.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A forward op produced (or was handed) a non-finite value.
    NonFinite { op: &'static str },
    /// Invalid argument or state, with a human-readable reason.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Error::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

/// Shorthand for `Error::Invalid` with formatting.
#[macro_export]
macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(alloc::format!($($arg)*))
    };
}
