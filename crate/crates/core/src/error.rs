use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("padding capacity exceeded: part of length {len} does not fit in {capacity}")]
    PaddingCapacity { len: usize, capacity: usize },
    #[error("topology index {index} exceeds table capacity {capacity}")]
    TopologyCapacity { index: usize, capacity: usize },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("imputation error: {0}")]
    Imputation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("degenerate normalization: {0}")]
    DegenerateNormalization(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
