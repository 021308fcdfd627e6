use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("tensor contains a non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("cannot factorize {dim} with factors <= {max_factor}: prime factor {prime} exceeds the cap (zero-pad the dimension)")]
    Factorization { dim: usize, prime: usize, max_factor: usize },

    #[error("invalid tensor-train: {0}")]
    InvalidTt(String),

    #[error("matrix is not orthogonal: ||U^T U - I||_F = {residual:e}")]
    NotOrthogonal { residual: f64 },

    #[error("core {core} is {rows}x{cols}, which exceeds the {max}x{max} core cap; re-factorize the layer dimensions with a smaller max_factor")]
    CoreTooLarge { core: usize, rows: usize, cols: usize, max: usize },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}
