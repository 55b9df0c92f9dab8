use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("unsupported feature: {0}")]
    Unsupported(String),

    #[error("validation failed [{check}]: {message}")]
    Validation { check: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no kernel entry covers pre-jump point {0}")]
    KernelCoverage(String),

    #[error("policy table does not cover {0}")]
    PolicyCoverage(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("more than {0} jumps before the horizon; process looks explosive")]
    Explosion(usize),

    #[error("artifact was computed for model {expected}, found {found}")]
    ModelMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn validation(check: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            check: check.into(),
            message: message.into(),
        }
    }
}
