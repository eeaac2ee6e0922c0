//! Multi-GPU KV-cache placement: request model, the Mell scheduler, baselines,
//! migration planning, workload generation, simulation and verification oracles.

pub mod baseline;
pub mod config;
pub mod error;
pub mod migration;
pub mod model;
pub mod oracle;
pub mod scheduler;
pub mod sim;
pub mod verify;
pub mod workload;

pub use error::{Error, Result};
pub use model::{
    ClusterState, GpuId, GroupId, ItemId, Request, RequestId, RequestState, SizeClass,
};
pub use scheduler::{MellScheduler, Move, OperationLog, PriorityConfig, Scheduler};
