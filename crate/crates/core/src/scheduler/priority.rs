use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClusterState, GpuId};

/// Weights of the factors that rank candidate GPUs. Free memory is measured as a
/// fraction of capacity, so the default count weight is comparable to a few percent of C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorityConfig {
    pub weight_free_mem: f64,
    pub weight_request_count: f64,
    pub weight_same_machine: f64,
}

impl Default for PriorityConfig {
    fn default() -> Self {
        Self {
            weight_free_mem: 1.0,
            weight_request_count: 0.05,
            weight_same_machine: 0.1,
        }
    }
}

impl PriorityConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.weight_free_mem,
            self.weight_request_count,
            self.weight_same_machine,
        ];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("priority weights must be finite and non-negative".into()));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config("at least one priority weight must be positive".into()));
        }
        Ok(())
    }

    fn workload_score(&self, cluster: &ClusterState, gpu: GpuId) -> f64 {
        let free = cluster.free_bytes(gpu) as f64 / cluster.capacity() as f64;
        let count = cluster.gpu(gpu).map_or(0, |g| g.residents.len()) as f64;
        self.weight_free_mem * free - self.weight_request_count * count
    }
}

/// Priority of `gpu` for receiving a new request; depends only on its own workload.
pub fn allocation_priority(cluster: &ClusterState, gpu: GpuId, cfg: &PriorityConfig) -> f64 {
    cfg.workload_score(cluster, gpu)
}

/// Priority of `dst` as seen from `src`: dst workload plus a same-machine bonus.
pub fn migration_priority(
    cluster: &ClusterState,
    src: GpuId,
    dst: GpuId,
    cfg: &PriorityConfig,
) -> f64 {
    let same = cluster.machine_of(src) == cluster.machine_of(dst);
    cfg.workload_score(cluster, dst) + if same { cfg.weight_same_machine } else { 0.0 }
}

/// Orders candidates best-first: higher score, then lower GPU id.
pub(crate) fn best_first(a: (f64, GpuId), b: (f64, GpuId)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}
