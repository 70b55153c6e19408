use alloc::string::String;
use core::fmt;

/// Failure categories shared by every module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Operand extents do not line up.
    Dimension(String),
    /// A caller broke an operation's precondition (bad id, foreign variable, ...).
    Contract(String),
    /// A configuration value is out of its allowed range.
    Config(String),
    /// A computation produced NaN or an infinity.
    Numeric(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::Error::Dimension(alloc::format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::Error::Contract(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, dim_err};
