use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("fit of {target} failed: target is non-finite at x = {x}")]
    Fit { target: String, x: f64 },

    #[error("format error: expected {expected}, found {found}")]
    Format { expected: String, found: String },

    #[error("energy ratio undefined: no FLOPs recorded")]
    UndefinedRatio,

    #[error("unknown operation kind `{kind}` (known: {})", known.join(", "))]
    UnknownOpKind { kind: String, known: Vec<String> },

    #[error("numeric failure at site {site}, timestep {step}")]
    NumericFailure { site: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
