use alloc::string::String;

/// Errors surfaced by the core model, loss and data routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An input has the wrong rank or extent for the operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// An image is too small for the four-level pyramid.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Input values violate a documented precondition (non-finite pixels, bad boxes, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// The model or loss configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A parameter key was requested that the store does not hold.
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    /// A configuration selects a component that has no implementation.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
