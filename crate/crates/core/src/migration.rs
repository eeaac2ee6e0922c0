//! Hybrid migration planning: each epoch, every migration is carried either as a
//! KV-cache copy over its link or as a token re-prefill on the destination, within
//! per-link and per-GPU budgets. Moves that fit neither wait for a later epoch.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GpuId, ItemId};

/// Default number of consecutive epochs a move may wait before it is forced through.
pub const DEFAULT_MAX_DEFER: u32 = 3;

/// A shared transfer medium. GPUs of one machine share its switch; machines talk
/// over one link per machine pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkId {
    Intra { machine: u32 },
    Inter { a: u32, b: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Topology {
    pub gpus_per_machine: u32,
    pub intra_link_gbps: f64,
    pub inter_link_gbps: f64,
    pub prefill_tokens_per_s: f64,
    /// Per-GPU prefill throughput where it differs from the default.
    pub prefill_overrides: BTreeMap<u32, f64>,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            gpus_per_machine: 8,
            intra_link_gbps: 400.0,
            inter_link_gbps: 100.0,
            prefill_tokens_per_s: 10_000.0,
            prefill_overrides: BTreeMap::new(),
        }
    }
}

impl Topology {
    pub fn validate(&self) -> Result<()> {
        if self.gpus_per_machine == 0 {
            return Err(Error::Config("gpus_per_machine must be positive".into()));
        }
        let rates = [self.intra_link_gbps, self.inter_link_gbps, self.prefill_tokens_per_s];
        if rates
            .iter()
            .chain(self.prefill_overrides.values())
            .any(|r| !r.is_finite() || *r <= 0.0)
        {
            return Err(Error::Config("bandwidths and prefill throughputs must be positive".into()));
        }
        Ok(())
    }

    pub fn machine_of(&self, gpu: GpuId) -> u32 {
        gpu.0 / self.gpus_per_machine.max(1)
    }

    pub fn link(&self, src: GpuId, dst: GpuId) -> LinkId {
        let (a, b) = (self.machine_of(src), self.machine_of(dst));
        if a == b {
            LinkId::Intra { machine: a }
        } else {
            LinkId::Inter {
                a: a.min(b),
                b: a.max(b),
            }
        }
    }

    /// Link bandwidth in bytes per second.
    pub fn bandwidth(&self, link: LinkId) -> f64 {
        let gbps = match link {
            LinkId::Intra { .. } => self.intra_link_gbps,
            LinkId::Inter { .. } => self.inter_link_gbps,
        };
        gbps * 1e9 / 8.0
    }

    pub fn prefill_throughput(&self, gpu: GpuId) -> f64 {
        self.prefill_overrides
            .get(&gpu.0)
            .copied()
            .unwrap_or(self.prefill_tokens_per_s)
    }
}

/// How much of each resource migrations may use in one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Boundaries {
    /// Bytes per epoch on each link.
    pub comm_budget: BTreeMap<LinkId, u64>,
    /// Re-prefill tokens per epoch on each destination GPU.
    pub comp_budget: BTreeMap<GpuId, u64>,
}

/// Budgets for every link among `gpus` and every GPU in `gpus`: a `fraction` of
/// what the hardware can do in one epoch.
pub fn load_boundaries(
    topology: &Topology,
    gpus: &[GpuId],
    epoch_seconds: f64,
    fraction: f64,
) -> Result<Boundaries> {
    topology.validate()?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("migration budget fraction {fraction} must lie in (0, 1]")));
    }
    if !(epoch_seconds.is_finite() && epoch_seconds > 0.0) {
        return Err(Error::Config("epoch length must be positive".into()));
    }
    let mut b = Boundaries::default();
    for &s in gpus {
        for &d in gpus {
            let link = topology.link(s, d);
            b.comm_budget.entry(link).or_insert_with(|| {
                ((topology.bandwidth(link) * epoch_seconds * fraction).floor() as u64).max(1)
            });
        }
        let tokens = topology.prefill_throughput(s) * epoch_seconds * fraction;
        b.comp_budget.insert(s, (tokens.floor() as u64).max(1));
    }
    Ok(b)
}

/// A migration awaiting a transport decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingMove {
    pub item: ItemId,
    pub src: GpuId,
    pub dst: GpuId,
    pub kv_bytes: u64,
    /// Prompt plus generated tokens, the cost of rebuilding the cache by prefill.
    pub tokens: u64,
    /// Consecutive epochs this move has already waited.
    pub deferrals: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    KvTransfer,
    TokenTransfer,
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub mv: PendingMove,
    pub mode: TransferMode,
    /// Over budget because the move waited too long.
    pub forced: bool,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PlanEvent {
    ForcedKvTransfer { item: ItemId, deferrals: u32 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub assignments: Vec<Assignment>,
    pub link_bytes: BTreeMap<LinkId, u64>,
    pub dest_tokens: BTreeMap<GpuId, u64>,
    pub events: Vec<PlanEvent>,
}

impl MigrationPlan {
    pub fn count(&self, mode: TransferMode) -> usize {
        self.assignments.iter().filter(|a| a.mode == mode).count()
    }

    pub fn forced(&self) -> usize {
        self.assignments.iter().filter(|a| a.forced).count()
    }

    /// Resources used beyond their budget: (what, used, budget).
    pub fn overruns(&self, b: &Boundaries) -> Vec<(String, u64, u64)> {
        let links = self.link_bytes.iter().filter_map(|(l, &used)| {
            let cap = b.comm_budget.get(l).copied().unwrap_or(0);
            (used > cap).then(|| (format!("{l:?}"), used, cap))
        });
        let gpus = self.dest_tokens.iter().filter_map(|(g, &used)| {
            let cap = b.comp_budget.get(g).copied().unwrap_or(0);
            (used > cap).then(|| (g.to_string(), used, cap))
        });
        links.chain(gpus).collect()
    }
}

/// Canonical processing order: larger caches first, then by item id. Independent
/// planners given the same set agree on the sequence.
pub fn consensus_order(moves: &[PendingMove]) -> Vec<PendingMove> {
    let mut v = moves.to_vec();
    v.sort_by_key(|m| (Reverse(m.kv_bytes), m.item, m.src, m.dst));
    v
}

/// Assigns a transport to every move in consensus order: KV copy if the link has
/// room, else re-prefill if the destination has room, else wait. A move that has
/// already waited `max_defer` epochs is copied regardless and flagged.
pub fn plan_hybrid(
    moves: &[PendingMove],
    boundaries: &Boundaries,
    topology: &Topology,
    max_defer: u32,
) -> Result<MigrationPlan> {
    let mut plan = MigrationPlan::default();
    let mut comm = boundaries.comm_budget.clone();
    let mut comp = boundaries.comp_budget.clone();
    for mv in consensus_order(moves) {
        let link = topology.link(mv.src, mv.dst);
        let link_left = comm
            .get_mut(&link)
            .ok_or_else(|| Error::Config(format!("no budget for link {link:?}")))?;
        let kv_latency = mv.kv_bytes as f64 / topology.bandwidth(link);
        let (mode, forced, latency) = if *link_left >= mv.kv_bytes {
            *link_left -= mv.kv_bytes;
            (TransferMode::KvTransfer, false, kv_latency)
        } else {
            let gpu_left = comp
                .get_mut(&mv.dst)
                .ok_or_else(|| Error::Config(format!("no budget for {}", mv.dst)))?;
            if *gpu_left >= mv.tokens {
                *gpu_left -= mv.tokens;
                let latency = mv.tokens as f64 / topology.prefill_throughput(mv.dst);
                (TransferMode::TokenTransfer, false, latency)
            } else if mv.deferrals >= max_defer {
                *link_left = link_left.saturating_sub(mv.kv_bytes);
                plan.events.push(PlanEvent::ForcedKvTransfer {
                    item: mv.item,
                    deferrals: mv.deferrals,
                });
                (TransferMode::KvTransfer, true, kv_latency)
            } else {
                (TransferMode::Deferred, false, 0.0)
            }
        };
        match mode {
            TransferMode::KvTransfer => *plan.link_bytes.entry(link).or_default() += mv.kv_bytes,
            TransferMode::TokenTransfer => *plan.dest_tokens.entry(mv.dst).or_default() += mv.tokens,
            TransferMode::Deferred => {}
        }
        plan.assignments.push(Assignment {
            mv,
            mode,
            forced,
            latency_s: latency,
        });
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RequestId;
    use proptest::prelude::*;

    fn mv(id: u64, src: u32, dst: u32, kv: u64, tokens: u64) -> PendingMove {
        PendingMove {
            item: ItemId::Request(RequestId(id)),
            src: GpuId(src),
            dst: GpuId(dst),
            kv_bytes: kv,
            tokens,
            deferrals: 0,
        }
    }

    fn gpus(n: u32) -> Vec<GpuId> {
        (0..n).map(GpuId).collect()
    }

    #[test]
    fn boundary_arithmetic() {
        let topo = Topology {
            intra_link_gbps: 10.0,
            prefill_tokens_per_s: 10_000.0,
            ..Topology::default()
        };
        let b = load_boundaries(&topo, &gpus(2), 1.0, 0.5).unwrap();
        assert_eq!(b.comm_budget[&LinkId::Intra { machine: 0 }], 625_000_000);
        let b = load_boundaries(&topo, &gpus(2), 1.0, 0.1).unwrap();
        assert_eq!(b.comp_budget[&GpuId(0)], 1_000);
        assert!(load_boundaries(&topo, &gpus(2), 1.0, 0.0).is_err());
    }

    #[test]
    fn links_by_machine() {
        let topo = Topology {
            gpus_per_machine: 2,
            ..Topology::default()
        };
        assert_eq!(topo.link(GpuId(0), GpuId(1)), LinkId::Intra { machine: 0 });
        assert_eq!(topo.link(GpuId(3), GpuId(0)), LinkId::Inter { a: 0, b: 1 });
        assert_eq!(topo.link(GpuId(0), GpuId(3)), topo.link(GpuId(3), GpuId(0)));
    }

    #[test]
    fn kv_first_then_tokens() {
        let gb = 1u64 << 30;
        let topo = Topology::default();
        let mut b = load_boundaries(&topo, &gpus(2), 1.0, 1.0).unwrap();
        b.comm_budget.insert(LinkId::Intra { machine: 0 }, 8 * gb);
        b.comp_budget.insert(GpuId(1), 1000);
        let moves = [mv(1, 0, 1, 8 * gb, 4000), mv(2, 0, 1, 2 * gb, 500)];
        let plan = plan_hybrid(&moves, &b, &topo, DEFAULT_MAX_DEFER).unwrap();
        let modes: Vec<_> = plan.assignments.iter().map(|a| a.mode).collect();
        assert_eq!(modes, vec![TransferMode::KvTransfer, TransferMode::TokenTransfer]);
        assert!(plan.overruns(&b).is_empty());
    }

    #[test]
    fn empty_and_exhausted() {
        let topo = Topology::default();
        let mut b = load_boundaries(&topo, &gpus(2), 1.0, 1.0).unwrap();
        assert!(plan_hybrid(&[], &b, &topo, 3).unwrap().assignments.is_empty());
        b.comm_budget.insert(LinkId::Intra { machine: 0 }, 1);
        b.comp_budget.insert(GpuId(1), 1);
        let plan = plan_hybrid(&[mv(1, 0, 1, 10, 10)], &b, &topo, 3).unwrap();
        assert_eq!(plan.assignments[0].mode, TransferMode::Deferred);
        assert!(plan.link_bytes.is_empty() && plan.dest_tokens.is_empty());
    }

    #[test]
    fn overdue_move_is_forced() {
        let topo = Topology::default();
        let mut b = load_boundaries(&topo, &gpus(2), 1.0, 1.0).unwrap();
        b.comm_budget.insert(LinkId::Intra { machine: 0 }, 1);
        b.comp_budget.insert(GpuId(1), 1);
        let mut m = mv(1, 0, 1, 10, 10);
        m.deferrals = 3;
        let plan = plan_hybrid(&[m], &b, &topo, 3).unwrap();
        assert!(plan.assignments[0].forced);
        assert_eq!(plan.assignments[0].mode, TransferMode::KvTransfer);
        assert_eq!(plan.events.len(), 1);
        assert_eq!(plan.overruns(&b).len(), 1);
    }

    #[test]
    fn consensus_example() {
        let order = consensus_order(&[mv(9, 0, 1, 3, 1), mv(4, 0, 1, 7, 1), mv(2, 0, 1, 7, 1)]);
        let ids: Vec<_> = order.iter().map(|m| m.item).collect();
        assert_eq!(
            ids,
            vec![
                ItemId::Request(RequestId(2)),
                ItemId::Request(RequestId(4)),
                ItemId::Request(RequestId(9))
            ]
        );
        assert_eq!(consensus_order(&[mv(1, 0, 1, 5, 1)]).len(), 1);
    }

    #[test]
    fn latency_is_linear() {
        let topo = Topology::default();
        let b = load_boundaries(&topo, &gpus(2), 1000.0, 1.0).unwrap();
        let p1 = plan_hybrid(&[mv(1, 0, 1, 1000, 1)], &b, &topo, 3).unwrap();
        let p2 = plan_hybrid(&[mv(1, 0, 1, 2000, 1)], &b, &topo, 3).unwrap();
        let (l1, l2) = (p1.assignments[0].latency_s, p2.assignments[0].latency_s);
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn missing_budget_is_config_error() {
        let topo = Topology::default();
        let b = Boundaries::default();
        assert!(matches!(plan_hybrid(&[mv(1, 0, 1, 1, 1)], &b, &topo, 3), Err(Error::Config(_))));
    }

    fn arb_moves() -> impl Strategy<Value = Vec<PendingMove>> {
        prop::collection::vec((0u64..50, 0u32..6, 0u32..6, 1u64..2000, 1u64..500, 0u32..5), 0..30).prop_map(|v| {
            v.into_iter()
                .map(|(id, s, d, kv, t, def)| PendingMove { deferrals: def, ..mv(id, s, d, kv, t) })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn consensus_is_permutation_invariant(moves in arb_moves(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = moves.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(consensus_order(&moves), consensus_order(&shuffled));
        }

        #[test]
        fn budgets_hold_unless_forced(moves in arb_moves(), frac in 0.0001f64..0.01) {
            let topo = Topology { gpus_per_machine: 2, ..Topology::default() };
            let b = load_boundaries(&topo, &gpus(6), 1e-4, frac).unwrap();
            let plan = plan_hybrid(&moves, &b, &topo, 3).unwrap();
            if plan.forced() == 0 {
                prop_assert!(plan.overruns(&b).is_empty());
            }
            prop_assert_eq!(plan.assignments.len(), moves.len());
            prop_assert_eq!(plan.forced(), plan.events.len());
        }
    }
}
