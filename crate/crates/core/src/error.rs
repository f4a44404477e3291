use thiserror::Error;
use updp_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape error at `{node}`: {msg}")]
    Shape { node: String, msg: String },
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("unknown architecture family `{0}`")]
    UnknownFamily(String),
    #[error("block `{block}`: {msg}")]
    Block { block: String, msg: String },
    #[error("mask: {0}")]
    Mask(String),
    #[error("search: {0}")]
    Search(String),
    #[error("training: {0}")]
    Training(String),
    #[error("cannot merge `{node}`: {msg}")]
    Merge { node: String, msg: String },
    #[error("dataset: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("stage `{stage}`: {msg}")]
    Stage { stage: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(node: &str, msg: impl Into<String>) -> Self {
        Error::Shape {
            node: node.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn block(block: &str, msg: impl Into<String>) -> Self {
        Error::Block {
            block: block.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn merge(node: &str, msg: impl Into<String>) -> Self {
        Error::Merge {
            node: node.to_string(),
            msg: msg.into(),
        }
    }
}
