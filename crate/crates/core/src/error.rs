use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Invalid sizes, orders or other settings.
    #[error("configuration error: {0}")]
    Config(String),
    /// A parameter value outside the problem's parameter domain.
    #[error("parameter {value} outside domain [{lo}, {hi}] in component {component}")]
    Domain {
        component: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    /// A numerical routine failed to converge or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    /// A relative error was requested against a zero reference.
    #[error("reference field has zero norm")]
    ZeroReference,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
