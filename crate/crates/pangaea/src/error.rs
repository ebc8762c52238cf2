use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] pangaea_core::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("parameter {name}: shape {found:?} in file, model expects {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("parameter {0} is missing from the file")]
    MissingParam(String),
    #[error("parameter {0} in the file does not exist in the model")]
    UnknownParam(String),
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl IoError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| IoError::Io { path, source }
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        IoError::Format { what, message: message.into() }
    }

    /// Short machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            IoError::Io { .. } => "io",
            IoError::Core(e) => core_kind(e),
            IoError::BadMagic { .. } => "bad_magic",
            IoError::Version { .. } => "version",
            IoError::Truncated { .. } => "truncated",
            IoError::Checksum => "checksum",
            IoError::Shape { .. } => "shape",
            IoError::MissingParam(_) => "missing_param",
            IoError::UnknownParam(_) => "unknown_param",
            IoError::Format { .. } => "format",
            IoError::Csv { .. } => "csv",
            IoError::Json(_) => "json",
        }
    }
}

fn core_kind(e: &pangaea_core::Error) -> &'static str {
    use pangaea_core::Error as E;
    match e {
        E::Dimension(_) => "dimension",
        E::Contract(_) => "contract",
        E::Config(_) => "config",
        E::PaddingCapacity { .. } => "padding_capacity",
        E::TopologyCapacity { .. } => "topology_capacity",
        E::Evaluation(_) => "evaluation",
        E::Imputation(_) => "imputation",
        E::Domain(_) => "domain",
        E::Fit(_) => "fit",
        E::UndefinedMetric(_) => "undefined_metric",
        E::DegenerateNormalization(_) => "degenerate_normalization",
    }
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;
