use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes of the
/// public contracts: shape mismatches, numeric blow-ups, broken API
/// preconditions, and the various file-format failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parameter registry: {0}")]
    Registry(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("validation failed for {subject}: {detail}")]
    Validation { subject: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported version {found}, expected {supported}")]
    Version { found: u8, supported: u8 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn validation(subject: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Validation {
            subject: subject.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input (configs, manifests,
    /// malformed files) as opposed to runtime failures. The CLI maps
    /// these onto exit code 1.
    pub fn is_user_input(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Format(_)
                | Error::Truncation(_)
                | Error::Config(_)
                | Error::Version { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
