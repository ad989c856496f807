use alloc::string::String;

/// Errors raised by the core engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Input data does not have the expected structure.
    #[error("malformed input: {0}")]
    MalformedInput(String),
    /// Tensor shapes or channel counts disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A configuration value is invalid or missing.
    #[error("config error: {0}")]
    Config(String),
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A value became NaN or infinite.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A byte stream failed to decode; `offset` is where decoding stopped.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
