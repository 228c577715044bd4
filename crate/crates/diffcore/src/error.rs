use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter {0} registered twice on the same tape")]
    DuplicateParam(usize),
}

pub type Result<T> = std::result::Result<T, DiffError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(DiffError::Shape {
        op,
        detail: detail.into(),
    })
}
