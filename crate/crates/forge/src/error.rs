use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum ForgeError {
    /// Tensor or layer dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Structural problem in a graph: bad wiring, unknown node, cycle, ...
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid configuration or input file.
    #[error("config error: {0}")]
    Config(String),

    /// A failure during execution or training (NaN loss, missing weight, ...).
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ForgeError>;

impl ForgeError {
    pub fn shape(msg: impl Into<String>) -> Self {
        ForgeError::Shape(msg.into())
    }
    pub fn graph(msg: impl Into<String>) -> Self {
        ForgeError::Graph(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        ForgeError::Config(msg.into())
    }
    pub fn runtime(msg: impl Into<String>) -> Self {
        ForgeError::Runtime(msg.into())
    }
}
