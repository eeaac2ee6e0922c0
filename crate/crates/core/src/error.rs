use thiserror::Error;

use crate::model::{GpuId, RequestId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("request {id} needs {size} bytes but a GPU holds {capacity}")]
    RequestTooLarge {
        id: RequestId,
        size: u64,
        capacity: u64,
    },
    #[error("request {0} is not placed on any GPU")]
    NotPlaced(RequestId),
    #[error("request {0} is unknown to the cluster")]
    UnknownRequest(RequestId),
    #[error("GPU {0} is empty and has no category")]
    NoCategory(GpuId),
    #[error("item of {size} bytes cannot fit a bin of {capacity} bytes")]
    Infeasible { size: u64, capacity: u64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
