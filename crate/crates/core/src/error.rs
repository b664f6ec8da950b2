use std::io;

/// Errors surfaced by graph construction, execution, training and file IO.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid shapes, wiring or hyper-parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API called out of order or with arguments that cannot be honored.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or out-of-range input data (labels, images, manifests).
    #[error("data error: {0}")]
    Data(String),

    /// A metric or reduction with nothing to reduce over.
    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("non-finite loss at iteration {iter} in head {head}")]
    NonFinite { iter: usize, head: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use data_err;
