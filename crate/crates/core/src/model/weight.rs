//! Request weights used to relate the online GPU count to the offline optimum.
//!
//! A single L-request (no M/S-request on its GPU) weighs 1, a combined L-request 5/6,
//! an M-request 1/2, an S-request 1/3, and T or Tiny requests nothing.

use num_rational::Ratio;

use super::class::SizeClass;
use super::cluster::{ClusterState, GpuId, ItemId};
use super::request::RequestId;
use crate::error::{Error, Result};

pub type Weight = Ratio<u64>;

pub fn class_weight(class: SizeClass, combined: bool) -> Weight {
    match class {
        SizeClass::L if combined => Ratio::new(5, 6),
        SizeClass::L => Ratio::from_integer(1),
        SizeClass::M => Ratio::new(1, 2),
        SizeClass::S => Ratio::new(1, 3),
        SizeClass::T | SizeClass::Tiny => Ratio::from_integer(0),
    }
}

/// Whether `gpu` carries at least one M- or S-request.
pub fn has_medium_or_small(cluster: &ClusterState, gpu: GpuId) -> bool {
    cluster.residents(gpu).into_iter().any(|item| {
        matches!(item, ItemId::Request(_)) && cluster.item_class(item).is_medium_or_small()
    })
}

pub fn request_weight(id: RequestId, cluster: &ClusterState) -> Result<Weight> {
    let gpu = cluster.gpu_of_request(id).ok_or(Error::NotPlaced(id))?;
    let class = cluster.request_class(id).ok_or(Error::UnknownRequest(id))?;
    if cluster.request(id).is_some_and(|t| t.group.is_some()) {
        return Ok(class_weight(SizeClass::Tiny, false));
    }
    Ok(class_weight(class, has_medium_or_small(cluster, gpu)))
}

/// Weight of one GPU computed from its residents alone.
pub fn gpu_weight(cluster: &ClusterState, gpu: GpuId) -> Weight {
    let combined = has_medium_or_small(cluster, gpu);
    cluster
        .residents(gpu)
        .into_iter()
        .filter(|i| matches!(i, ItemId::Request(_)))
        .map(|i| class_weight(cluster.item_class(i), combined))
        .fold(Ratio::from_integer(0), |a, b| a + b)
}

/// The sum of request weights over every placed request.
pub fn total_weight(cluster: &ClusterState) -> Weight {
    cluster
        .requests()
        .filter_map(|t| request_weight(t.request.id, cluster).ok())
        .fold(Ratio::from_integer(0), |a, b| a + b)
}
