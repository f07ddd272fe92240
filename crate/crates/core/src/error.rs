use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced at node {node}")]
    Numeric { node: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("checkpoint corrupt: {0}")]
    Checkpoint(String),

    #[error("image format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
