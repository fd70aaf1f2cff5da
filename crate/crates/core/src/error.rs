use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes that do not line up for an operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A NaN or infinity appeared in an input or an output.
    #[error("numeric error: non-finite value in {0}")]
    NonFinite(&'static str),
    /// The caller violated a precondition (empty input, non-scalar root, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// Invalid configuration values.
    #[error("config error: {0}")]
    Config(String),
    /// Synthetic data could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! usage {
    ($($arg:tt)*) => { $crate::Error::Usage(alloc::format!($($arg)*)) };
}
macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::Error::Dimension(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use dim_err;
pub(crate) use usage;
