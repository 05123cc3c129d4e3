use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Demand cannot be met under the demand, capacity, export and core rows.
    #[error("market clearing is infeasible")]
    Infeasible,

    #[error("internal solver error: {0}")]
    Internal(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid market data: {0}")]
    InvalidMarket(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no feasible point reached by any start")]
    NoFeasiblePoint,

    #[error("profits sum to zero")]
    ZeroTotal,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
