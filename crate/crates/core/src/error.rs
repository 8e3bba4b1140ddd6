use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm layer {layer} has no running statistics and no override was supplied")]
    MissingBnStats { layer: usize },

    #[error("unknown instance `{id}`; valid ids: {valid}")]
    UnknownInstance { id: String, valid: String },

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("data error in {path} at byte offset {offset}: {msg}")]
    Data {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error("empty data stream")]
    EmptyData,

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
