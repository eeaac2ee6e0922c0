//! Domain types: requests, size classes, GPUs and the cluster placement.

mod class;
mod cluster;
mod request;
mod weight;

pub use class::{classify_request, SizeClass};
pub use cluster::{ClusterState, GpuId, GpuState, GroupId, ItemId, MultiItemGroup, TrackedRequest};
pub use request::{kv_size_at, Request, RequestId, RequestState};
pub use weight::{class_weight, gpu_weight, has_medium_or_small, request_weight, total_weight, Weight};

use crate::error::{Error, Result};

/// Category of a non-empty GPU.
pub fn classify_gpu(gpu: GpuId, cluster: &ClusterState) -> Result<SizeClass> {
    cluster.gpu_category(gpu).ok_or(Error::NoCategory(gpu))
}

/// GPUs currently hosting at least one request.
pub fn active_gpu_count(cluster: &ClusterState) -> usize {
    cluster.active_gpu_count()
}
