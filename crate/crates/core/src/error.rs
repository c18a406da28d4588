use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced by {what}")]
    NonFinite { what: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this graph")]
    ForeignVar,

    #[error("operation {0} does not support higher-order gradients")]
    Unsupported(&'static str),

    #[error("no parameter named {0}")]
    MissingParam(String),

    #[error("missing anchor entry for penalized parameter {0}")]
    MissingAnchor(String),

    #[error("unknown class {0}")]
    UnknownClass(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("unknown dataset `{id}`; available: {available}")]
    UnknownDataset { id: String, available: String },

    #[error("{key} {message}")]
    Config { key: String, message: String },

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error("checkpoint format version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("training aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
