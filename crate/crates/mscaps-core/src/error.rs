use alloc::string::String;
use core::fmt;

/// Errors shared by every module in the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor extents do not line up (channel mismatch, unequal image sizes, ...).
    Dimension(String),
    /// A value violates an operation's precondition (even kernel size, zero looks, ...).
    Argument(String),
    /// The input is too degenerate for the algorithm (constant data for clustering, ...).
    Degenerate(String),
    /// A serialized blob (checkpoint) is malformed.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Argument(msg) => write!(f, "argument error: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! err_dim {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(alloc::format!($($arg)*)) };
}
macro_rules! err_arg {
    ($($arg:tt)*) => { $crate::error::Error::Argument(alloc::format!($($arg)*)) };
}
macro_rules! err_degenerate {
    ($($arg:tt)*) => { $crate::error::Error::Degenerate(alloc::format!($($arg)*)) };
}
macro_rules! err_format {
    ($($arg:tt)*) => { $crate::error::Error::Format(alloc::format!($($arg)*)) };
}

pub(crate) use {err_arg, err_degenerate, err_dim, err_format};
