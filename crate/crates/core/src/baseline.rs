//! Comparison schedulers: Best-Fit and Worst-Fit without migration, and a
//! worst-fit Load-Balancer that migrates KV caches to even out GPU load.
//!
//! BF and WF never move a running request, so they reserve each request's final
//! footprint at admission; otherwise growth would overflow a GPU they cannot relieve.

use std::cmp::Reverse;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClusterState, GpuId, ItemId, RequestId};
use crate::scheduler::{
    EpochEvents, Move, MoveReason, OperationKind, OperationLog, SchedEvent, Scheduler, StepOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fit {
    Best,
    Worst,
}

/// Bytes a request holds for placement purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Footprint {
    /// Final size, capped at capacity.
    Reserved,
    Current,
}

fn footprint(c: &ClusterState, r: RequestId, mode: Footprint) -> u64 {
    let Some(t) = c.request(r) else { return 0 };
    match mode {
        Footprint::Reserved => t.request.peak_kv_bytes().max(t.size).min(c.capacity()),
        Footprint::Current => t.size,
    }
}

fn load(c: &ClusterState, g: GpuId, mode: Footprint) -> u64 {
    c.residents(g)
        .into_iter()
        .map(|i| match i {
            ItemId::Request(r) => footprint(c, r, mode),
            ItemId::Group(_) => c.item_size(i),
        })
        .sum()
}

fn free(c: &ClusterState, g: GpuId, mode: Footprint) -> u64 {
    c.capacity().saturating_sub(load(c, g, mode))
}

/// The GPU chosen by `fit` among those with at least `need` free bytes. Ties go to
/// the lower id.
fn choose(c: &ClusterState, need: u64, fit: Fit, mode: Footprint, skip: Option<GpuId>) -> Option<GpuId> {
    let fitting = c
        .gpu_ids()
        .into_iter()
        .filter(|&g| Some(g) != skip)
        .map(|g| (free(c, g, mode), g))
        .filter(|&(f, _)| f >= need);
    match fit {
        Fit::Best => fitting.min_by_key(|&(f, g)| (f, g)).map(|x| x.1),
        Fit::Worst => fitting.min_by_key(|&(f, g)| (Reverse(f), g)).map(|x| x.1),
    }
}

fn place_new(c: &mut ClusterState, r: RequestId, fit: Fit, mode: Footprint) -> Result<OperationLog> {
    let class = c.request_class(r).ok_or(Error::UnknownRequest(r))?;
    let need = footprint(c, r, mode);
    if need > c.capacity() {
        return Err(Error::RequestTooLarge {
            id: r,
            size: need,
            capacity: c.capacity(),
        });
    }
    let gpu = match choose(c, need, fit, mode, None) {
        Some(g) => g,
        None => c.activate_gpu(),
    };
    c.place(ItemId::Request(r), gpu)?;
    let mut log = OperationLog::new(OperationKind::Allocate, Some(r), Some(class));
    log.moves.push(Move {
        item: ItemId::Request(r),
        src: None,
        dst: gpu,
        reason: MoveReason::Allocate,
    });
    Ok(log)
}

fn remove(c: &mut ClusterState, r: RequestId) -> Result<OperationLog> {
    let class = c.request_class(r).ok_or(Error::UnknownRequest(r))?;
    c.unplace(ItemId::Request(r));
    c.retire(r)?;
    Ok(OperationLog::new(OperationKind::Depart, Some(r), Some(class)))
}

fn record(out: &mut StepOutcome, r: RequestId, res: Result<OperationLog>) {
    match res {
        Ok(log) => out.logs.push(log),
        Err(e) => out.events.push(SchedEvent::OperationFailed {
            request: r,
            message: e.to_string(),
        }),
    }
}

/// Best-Fit or Worst-Fit dispatch by reserved footprint; never migrates.
#[derive(Debug, Clone)]
pub struct FitScheduler {
    fit: Fit,
}

impl FitScheduler {
    pub fn best_fit() -> Self {
        Self { fit: Fit::Best }
    }

    pub fn worst_fit() -> Self {
        Self { fit: Fit::Worst }
    }

    pub fn allocate(&self, c: &mut ClusterState, r: RequestId) -> Result<OperationLog> {
        place_new(c, r, self.fit, Footprint::Reserved)
    }
}

/// Places `r` on the active GPU with the least free memory that still fits it.
pub fn bf_allocate(c: &mut ClusterState, r: RequestId) -> Result<OperationLog> {
    FitScheduler::best_fit().allocate(c, r)
}

/// Places `r` on the active GPU with the most free memory.
pub fn wf_allocate(c: &mut ClusterState, r: RequestId) -> Result<OperationLog> {
    FitScheduler::worst_fit().allocate(c, r)
}

impl Scheduler for FitScheduler {
    fn name(&self) -> &str {
        match self.fit {
            Fit::Best => "bf",
            Fit::Worst => "wf",
        }
    }

    fn step(&mut self, c: &mut ClusterState, events: &EpochEvents) -> StepOutcome {
        let mut out = StepOutcome::default();
        for &r in &events.completions {
            record(&mut out, r, remove(c, r));
        }
        // Growth is covered by the reservation, so updates need no action.
        for &r in &events.arrivals {
            let res = self.allocate(c, r);
            record(&mut out, r, res);
        }
        out.terminated = c.terminate_empty();
        out
    }

    fn migrates(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbConfig {
    /// Epochs between rebalancing passes.
    pub rebalance_period: u64,
    /// Stop once max and min load differ by at most this fraction of capacity.
    pub imbalance_threshold: f64,
}

impl Default for LbConfig {
    fn default() -> Self {
        Self {
            rebalance_period: 1,
            imbalance_threshold: 0.25,
        }
    }
}

impl LbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rebalance_period == 0 {
            return Err(Error::Config("lb rebalance_period must be at least 1".into()));
        }
        if !(self.imbalance_threshold > 0.0 && self.imbalance_threshold < 1.0) {
            return Err(Error::Config("lb imbalance_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn migrate(c: &mut ClusterState, r: RequestId, dst: GpuId, reason: MoveReason) -> Result<Move> {
    let item = ItemId::Request(r);
    let src = c.unplace(item);
    c.place(item, dst)?;
    Ok(Move {
        item,
        src,
        dst,
        reason,
    })
}

/// Repeatedly moves the largest request that fits from the most to the least loaded
/// GPU while that narrows their gap, until the gap is within the threshold.
pub fn lb_rebalance(c: &mut ClusterState, cfg: &LbConfig) -> Result<OperationLog> {
    let mut log = OperationLog::new(OperationKind::Rebalance, None, None);
    let cap = c.capacity();
    let threshold = (cfg.imbalance_threshold * cap as f64).floor() as u64;
    // Each move strictly lowers the sum of squared loads, so this only guards bugs.
    let limit = 16 * (c.requests().count() + 1);
    for _ in 0..limit {
        let loads: Vec<(u64, GpuId)> = c
            .gpu_ids()
            .into_iter()
            .map(|g| (c.used_bytes(g), g))
            .collect();
        if loads.len() < 2 {
            break;
        }
        let (hi, h) = loads.iter().copied().min_by_key(|&(l, g)| (Reverse(l), g)).unwrap();
        let (lo, l) = loads.iter().copied().min_by_key(|&(l, g)| (l, g)).unwrap();
        let gap = hi - lo;
        if gap <= threshold {
            break;
        }
        let pick = c
            .residents(h)
            .into_iter()
            .filter_map(|i| match i {
                ItemId::Request(r) => Some((c.item_size(i), r)),
                ItemId::Group(_) => None,
            })
            .filter(|&(s, _)| s < gap && lo + s <= cap)
            .min_by_key(|&(s, r)| (Reverse(s), r));
        let Some((_, r)) = pick else { break };
        log.moves.push(migrate(c, r, l, MoveReason::Rebalance)?);
    }
    Ok(log)
}

/// Worst-fit dispatch by current footprint plus KV-transfer load balancing.
#[derive(Debug, Clone, Default)]
pub struct LbScheduler {
    pub config: LbConfig,
    epoch: u64,
}

impl LbScheduler {
    pub fn new(config: LbConfig) -> Self {
        Self { config, epoch: 0 }
    }

    /// Moves requests off GPUs that outgrew their capacity: the smallest request that
    /// clears the excess, else the largest, to the emptiest GPU with room.
    fn relieve(&self, c: &mut ClusterState, g: GpuId) -> Result<Vec<OperationLog>> {
        let mut logs = Vec::new();
        while c.overloaded(g) {
            let excess = c.used_bytes(g) - c.capacity();
            let mut sizes: Vec<(u64, RequestId)> = c
                .residents(g)
                .into_iter()
                .filter_map(|i| match i {
                    ItemId::Request(r) => Some((c.item_size(i), r)),
                    ItemId::Group(_) => None,
                })
                .collect();
            sizes.sort();
            let Some(&(size, r)) = sizes.iter().find(|&&(s, _)| s >= excess).or(sizes.last()) else {
                break;
            };
            let dst = match choose(c, size, Fit::Worst, Footprint::Current, Some(g)) {
                Some(d) => d,
                None => c.activate_gpu(),
            };
            let mut log = OperationLog::new(OperationKind::Update, Some(r), c.request_class(r));
            log.moves.push(migrate(c, r, dst, MoveReason::Update)?);
            logs.push(log);
        }
        Ok(logs)
    }
}

impl Scheduler for LbScheduler {
    fn name(&self) -> &str {
        "lb"
    }

    fn step(&mut self, c: &mut ClusterState, events: &EpochEvents) -> StepOutcome {
        let mut out = StepOutcome::default();
        for &r in &events.completions {
            record(&mut out, r, remove(c, r));
        }
        for g in c.gpu_ids() {
            match self.relieve(c, g) {
                Ok(logs) => out.logs.extend(logs),
                Err(e) => debug!("relieving {g} failed: {e}"),
            }
        }
        for &r in &events.arrivals {
            record(&mut out, r, place_new(c, r, Fit::Worst, Footprint::Current));
        }
        self.epoch += 1;
        if self.epoch % self.config.rebalance_period == 0 {
            match lb_rebalance(c, &self.config) {
                Ok(log) if !log.moves.is_empty() => out.logs.push(log),
                Ok(_) => {}
                Err(e) => debug!("rebalance failed: {e}"),
            }
        }
        out.terminated = c.terminate_empty();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Request;

    /// One GPU per entry of `loads`, each holding requests of the given sizes.
    fn cluster(cap: u64, loads: &[&[u64]]) -> ClusterState {
        let mut c = ClusterState::new(cap, 8);
        let mut id = 0;
        for load in loads {
            let g = c.activate_gpu();
            for &s in *load {
                // Response of one token so the reservation is s + 1 per-token byte.
                c.admit(Request::new(id, 0, s - 1, 1, 1).unwrap(), s).unwrap();
                c.place(ItemId::Request(RequestId(id)), g).unwrap();
                id += 1;
            }
        }
        c
    }

    fn arrive(c: &mut ClusterState, id: u64, size: u64) -> RequestId {
        c.admit(Request::new(id, 0, size - 1, 1, 1).unwrap(), size).unwrap();
        RequestId(id)
    }

    #[test]
    fn best_fit_picks_tightest() {
        // Free {5, 9, 20}.
        let mut c = cluster(24, &[&[19], &[15], &[4]]);
        let r = arrive(&mut c, 100, 8);
        let log = bf_allocate(&mut c, r).unwrap();
        assert_eq!(log.moves[0].dst, GpuId(1));
    }

    #[test]
    fn worst_fit_picks_emptiest() {
        let mut c = cluster(24, &[&[19], &[15], &[4]]);
        let r = arrive(&mut c, 100, 8);
        assert_eq!(wf_allocate(&mut c, r).unwrap().moves[0].dst, GpuId(2));
    }

    #[test]
    fn no_fit_activates_gpu() {
        for fit in [Fit::Best, Fit::Worst] {
            let mut c = cluster(24, &[&[19]]);
            let r = arrive(&mut c, 100, 8);
            let log = FitScheduler { fit }.allocate(&mut c, r).unwrap();
            assert_eq!(log.moves[0].dst, GpuId(1));
            assert_eq!(c.active_gpu_count(), 2);
        }
    }

    #[test]
    fn ties_go_to_lower_id() {
        for fit in [Fit::Best, Fit::Worst] {
            let mut c = cluster(24, &[&[15], &[15]]);
            let r = arrive(&mut c, 100, 8);
            let log = FitScheduler { fit }.allocate(&mut c, r).unwrap();
            assert_eq!(log.moves[0].dst, GpuId(0));
        }
    }

    #[test]
    fn reservation_counts_final_size() {
        let mut c = ClusterState::new(24, 8);
        // Holds 4 bytes now but will grow to 20.
        c.admit(Request::new(0, 0, 4, 16, 1).unwrap(), 4).unwrap();
        bf_allocate(&mut c, RequestId(0)).unwrap();
        let r = arrive(&mut c, 1, 8);
        assert_eq!(bf_allocate(&mut c, r).unwrap().moves[0].dst, GpuId(1));
    }

    #[test]
    fn fit_schedulers_never_migrate() {
        let mut c = cluster(24, &[&[10], &[6]]);
        let mut s = FitScheduler::best_fit();
        let a = arrive(&mut c, 100, 8);
        let out = s.step(
            &mut c,
            &EpochEvents {
                arrivals: vec![a],
                completions: vec![RequestId(0)],
                updates: vec![],
            },
        );
        assert_eq!(out.migrations(), 0);
        assert!(!s.migrates());
    }

    #[test]
    fn rebalance_example() {
        let mut c = cluster(24, &[&[10, 6, 6], &[2]]);
        let log = lb_rebalance(&mut c, &LbConfig::default()).unwrap();
        assert_eq!(log.migrations(), 1);
        assert_eq!((c.used_bytes(GpuId(0)), c.used_bytes(GpuId(1))), (12, 12));
    }

    #[test]
    fn balanced_or_single_gpu_is_left_alone() {
        let mut c = cluster(24, &[&[10], &[8]]);
        assert!(lb_rebalance(&mut c, &LbConfig::default()).unwrap().moves.is_empty());
        let mut c = cluster(24, &[&[20, 2]]);
        assert!(lb_rebalance(&mut c, &LbConfig::default()).unwrap().moves.is_empty());
    }

    #[test]
    fn overload_is_relieved_by_migration() {
        let mut c = cluster(24, &[&[12, 10], &[4]]);
        c.set_size(RequestId(0), 16).unwrap();
        let mut s = LbScheduler::new(LbConfig::default());
        let out = s.step(&mut c, &EpochEvents::default());
        assert!(c.capacity_violations().is_empty());
        assert!(out.migrations() >= 1);
    }

    #[test]
    fn config_validation() {
        assert!(LbConfig::default().validate().is_ok());
        let bad = LbConfig {
            rebalance_period: 0,
            ..LbConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LbConfig {
            imbalance_threshold: 1.0,
            ..LbConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
