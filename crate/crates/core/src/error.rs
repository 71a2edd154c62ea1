use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: input too short ({len} < {needed})")]
    InputTooShort {
        op: &'static str,
        len: usize,
        needed: usize,
    },

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {field}: {msg}")]
    Format { field: String, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short class name, used as the error prefix by command-line front ends.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Axis { .. } => "shape",
            Error::InputTooShort { .. } => "input",
            Error::NonFinite(_) => "numeric",
            Error::NonScalarLoss(_) | Error::MissingGrad(_) | Error::UnknownParam(_) => "graph",
            Error::Invalid(_) => "invalid",
            Error::Config(_) => "config",
            Error::Format { .. } | Error::Json(_) => "format",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn format(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
