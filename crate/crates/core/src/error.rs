use std::io;

use thiserror::Error;

use crate::autodiff::OpKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: OpKind, detail: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable #{index} does not belong to this tape")]
    LeafNotOnTape { index: usize },

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),

    #[error("in layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} at (y={y}, x={x}) is out of range for {classes} classes")]
    InvalidLabel {
        label: u8,
        y: usize,
        x: usize,
        classes: usize,
    },

    #[error("box {0:?} does not fit a {1}x{2} image")]
    OutOfBounds(crate::cascade::BBox, usize, usize),

    #[error("mean Dice is undefined: no class is present in any sample")]
    AllUndefined,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: OpKind, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }
}
