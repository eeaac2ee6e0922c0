//! Offline optimum and analysis checks: exact bin packing per slot, the competitive
//! bound against that optimum, and the request-weight bookkeeping behind it.

use std::collections::{BTreeSet, HashMap};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gpu_weight, total_weight, ClusterState, GpuId, ItemId, SizeClass, Weight};
use crate::scheduler::exempt_set;
use crate::sim::{Growth, MetricsSeries};
use crate::workload::Trace;

/// Largest instance solved exactly; bigger slots fall back to the volume bound.
pub const MAX_EXACT_ITEMS: usize = 20;

/// Additive allowance for the open GPUs, one per category.
pub const DEFAULT_SLACK: usize = 4;

fn check_sizes(sizes: &[u64], capacity: u64) -> Result<()> {
    match sizes.iter().find(|&&s| s > capacity) {
        Some(&size) => Err(Error::Infeasible { size, capacity }),
        None => Ok(()),
    }
}

fn volume_bound(sizes: &[u64], capacity: u64) -> usize {
    let total: u128 = sizes.iter().map(|&s| s as u128).sum();
    total.div_ceil(capacity.max(1) as u128) as usize
}

/// Bins used by first-fit over the sizes in decreasing order.
pub fn first_fit_decreasing(sizes: &[u64], capacity: u64) -> Result<usize> {
    check_sizes(sizes, capacity)?;
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let mut loads: Vec<u64> = Vec::new();
    for s in sorted {
        match loads.iter_mut().find(|l| **l + s <= capacity) {
            Some(l) => *l += s,
            None => loads.push(s),
        }
    }
    Ok(loads.len())
}

/// Minimum number of `capacity` bins holding `sizes`, by branch and bound.
pub fn exact_bin_pack(sizes: &[u64], capacity: u64) -> Result<usize> {
    check_sizes(sizes, capacity)?;
    let mut items: Vec<u64> = sizes.iter().copied().filter(|&s| s > 0).collect();
    if items.is_empty() {
        return Ok(usize::from(!sizes.is_empty()));
    }
    items.sort_unstable_by(|a, b| b.cmp(a));
    let lower = volume_bound(&items, capacity).max(items.iter().filter(|&&s| 2 * s > capacity).count());
    let mut best = first_fit_decreasing(&items, capacity)?;
    if best > lower {
        let mut suffix = vec![0u128; items.len() + 1];
        for i in (0..items.len()).rev() {
            suffix[i] = suffix[i + 1] + items[i] as u128;
        }
        let mut loads = Vec::with_capacity(best);
        search(&items, &suffix, capacity, lower, &mut loads, 0, &mut best);
    }
    Ok(best)
}

fn search(
    items: &[u64],
    suffix: &[u128],
    capacity: u64,
    lower: usize,
    loads: &mut Vec<u64>,
    i: usize,
    best: &mut usize,
) {
    if i == items.len() {
        *best = (*best).min(loads.len());
        return;
    }
    // Free space across open bins must absorb whatever does not open a new one.
    let free: u128 = loads.iter().map(|&l| (capacity - l) as u128).sum();
    let extra = suffix[i].saturating_sub(free).div_ceil(capacity as u128) as usize;
    if loads.len() + extra >= *best {
        return;
    }
    let s = items[i];
    let mut tried = BTreeSet::new();
    for b in 0..loads.len() {
        if loads[b] + s <= capacity && tried.insert(loads[b]) {
            loads[b] += s;
            search(items, suffix, capacity, lower, loads, i + 1, best);
            loads[b] -= s;
            if *best <= lower {
                return;
            }
        }
    }
    if loads.len() + 1 < *best {
        loads.push(s);
        search(items, suffix, capacity, lower, loads, i + 1, best);
        loads.pop();
    }
}

/// Minimum bins by enumerating every set partition. Exponential; for cross-checks only.
pub fn exhaustive_bin_pack(sizes: &[u64], capacity: u64) -> Result<usize> {
    check_sizes(sizes, capacity)?;
    fn go(sizes: &[u64], capacity: u64, i: usize, loads: &mut Vec<u64>, best: &mut usize) {
        if i == sizes.len() {
            *best = (*best).min(loads.len());
            return;
        }
        for b in 0..loads.len() {
            if loads[b] + sizes[i] <= capacity {
                loads[b] += sizes[i];
                go(sizes, capacity, i + 1, loads, best);
                loads[b] -= sizes[i];
            }
        }
        loads.push(sizes[i]);
        go(sizes, capacity, i + 1, loads, best);
        loads.pop();
    }
    let mut best = sizes.len();
    go(sizes, capacity, 0, &mut Vec::new(), &mut best);
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotOpt {
    pub slot: u64,
    pub alive: usize,
    pub total_bytes: u64,
    pub bins: usize,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptReport {
    pub per_slot: Vec<SlotOpt>,
    /// Maximum of the per-slot minima.
    pub opt: usize,
    /// False when some slot had too many requests and used the volume bound.
    pub exact: bool,
}

/// Offline optimum of the trace: every boundary slot is repacked from scratch, so the
/// optimum is the largest per-slot exact packing of the alive footprints.
pub fn opt_lower_bound(trace: &Trace, growth: &Growth, duration_slots: u64) -> Result<OptReport> {
    let requests = trace
        .records
        .iter()
        .map(|rec| growth.request(rec))
        .collect::<Result<Vec<_>>>()?;
    let mut cache: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut per_slot = Vec::new();
    for slot in (0..duration_slots).filter(|&s| growth.is_boundary(s)) {
        let mut sizes: Vec<u64> = requests.iter().filter_map(|r| growth.alive_size(r, slot)).collect();
        if sizes.is_empty() {
            continue;
        }
        sizes.sort_unstable();
        let total_bytes = sizes.iter().sum();
        let exact = sizes.len() <= MAX_EXACT_ITEMS;
        let bins = if !exact {
            volume_bound(&sizes, growth.capacity)
        } else if let Some(&b) = cache.get(&sizes) {
            b
        } else {
            let b = exact_bin_pack(&sizes, growth.capacity)?;
            cache.insert(sizes.clone(), b);
            b
        };
        per_slot.push(SlotOpt {
            slot,
            alive: sizes.len(),
            total_bytes,
            bins,
            exact,
        });
    }
    Ok(OptReport {
        opt: per_slot.iter().map(|s| s.bins).max().unwrap_or(0),
        exact: per_slot.iter().all(|s| s.exact),
        per_slot,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetitiveCheck {
    pub alg_peak: usize,
    pub opt: usize,
    pub slack: usize,
    /// ceil(4/3 · opt) + slack.
    pub bound: usize,
    pub ratio: f64,
    pub opt_exact: bool,
    pub pass: bool,
}

pub fn competitive_bound(opt: usize, slack: usize) -> usize {
    (4 * opt).div_ceil(3) + slack
}

pub fn competitive_check_peak(alg_peak: usize, opt: &OptReport, slack: usize) -> CompetitiveCheck {
    let bound = competitive_bound(opt.opt, slack);
    CompetitiveCheck {
        alg_peak,
        opt: opt.opt,
        slack,
        bound,
        ratio: if opt.opt == 0 { 1.0 } else { alg_peak as f64 / opt.opt as f64 },
        opt_exact: opt.exact,
        pass: alg_peak <= bound,
    }
}

pub fn competitive_check(metrics: &MetricsSeries, opt: &OptReport, slack: usize) -> CompetitiveCheck {
    competitive_check_peak(metrics.peak_gpus(), opt, slack)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuWeightRow {
    pub gpu: GpuId,
    /// Resident classes, largest first, e.g. `LM` or `SSS`.
    pub composition: String,
    pub weight: String,
    pub within_table: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAudit {
    pub total_weight: String,
    pub total_weight_value: f64,
    pub single_l: usize,
    pub combined_l: usize,
    pub active_gpus: usize,
    /// GPUs that hold something other than T-items.
    pub non_t_gpus: usize,
    pub exempt: usize,
    /// Non-T GPUs ≤ W + exempt count.
    pub count_bound_holds: bool,
    pub rows: Vec<GpuWeightRow>,
    pub table_holds: bool,
}

fn fmt_weight(w: Weight) -> String {
    if *w.denom() == 1 {
        w.numer().to_string()
    } else {
        format!("{}/{}", w.numer(), w.denom())
    }
}

fn composition(cluster: &ClusterState, gpu: GpuId) -> String {
    let mut classes: Vec<SizeClass> = cluster
        .residents(gpu)
        .into_iter()
        .map(|i| match i {
            ItemId::Request(_) => cluster.item_class(i).max(SizeClass::T),
            ItemId::Group(_) => SizeClass::T,
        })
        .collect();
    classes.sort_unstable_by(|a, b| b.cmp(a));
    classes.iter().map(|c| c.to_string()).collect()
}

/// Audits the weight scheme on a Mell-scheduled cluster: every GPU weighs at most 4/3
/// (an LM pair exactly 4/3), and the GPUs other than T-GPUs number at most W plus the
/// exempt GPUs.
pub fn weight_audit(cluster: &ClusterState) -> WeightAudit {
    let four_thirds = Ratio::new(4, 3);
    let mut single_l = 0;
    let mut combined_l = 0;
    let mut non_t = 0;
    let mut rows = Vec::new();
    for g in cluster.gpus().filter(|g| !g.residents.is_empty()) {
        let comp = composition(cluster, g.id);
        let l = comp.matches('L').count();
        if comp.contains(['M', 'S']) {
            combined_l += l;
        } else {
            single_l += l;
        }
        if comp.contains(['L', 'M', 'S']) {
            non_t += 1;
        }
        let w = gpu_weight(cluster, g.id);
        let within = w <= four_thirds && (comp != "LM" || w == four_thirds);
        rows.push(GpuWeightRow {
            gpu: g.id,
            composition: comp,
            weight: fmt_weight(w),
            within_table: within,
        });
    }
    let total = total_weight(cluster);
    let exempt = exempt_set(cluster).len();
    WeightAudit {
        total_weight: fmt_weight(total),
        total_weight_value: *total.numer() as f64 / *total.denom() as f64,
        single_l,
        combined_l,
        active_gpus: rows.len(),
        non_t_gpus: non_t,
        exempt,
        count_bound_holds: Ratio::from_integer(non_t as u64) <= total + Ratio::from_integer(exempt as u64),
        table_holds: rows.iter().all(|r| r.within_table),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Request, RequestId};
    use crate::workload::TraceRecord;
    use proptest::prelude::*;

    #[test]
    fn bin_pack_examples() {
        assert_eq!(exact_bin_pack(&[], 24).unwrap(), 0);
        assert_eq!(exact_bin_pack(&[13, 13, 9, 9], 24).unwrap(), 2);
        assert_eq!(exact_bin_pack(&[24; 5], 24).unwrap(), 5);
        assert!(matches!(exact_bin_pack(&[25], 24), Err(Error::Infeasible { size: 25, .. })));
    }

    #[test]
    fn beats_first_fit_decreasing() {
        let sizes = [3, 3, 2, 2, 2, 2];
        assert_eq!(first_fit_decreasing(&sizes, 7).unwrap(), 3);
        assert_eq!(exact_bin_pack(&sizes, 7).unwrap(), 2);
        assert_eq!(exhaustive_bin_pack(&sizes, 7).unwrap(), 2);
    }

    #[test]
    fn twenty_items_solve_quickly() {
        let sizes: Vec<u64> = (0..20).map(|i| 13 + (i * 37 % 41)).collect();
        let b = exact_bin_pack(&sizes, 100).unwrap();
        assert!(b >= volume_bound(&sizes, 100));
        assert!(b <= first_fit_decreasing(&sizes, 100).unwrap());
    }

    fn growth(capacity: u64) -> Growth {
        Growth {
            capacity,
            kv_bytes_per_token: 1,
            tokens_per_slot: 1,
            epoch_slots: 1,
        }
    }

    fn rec(id: u64, arrival: u64, prompt: u64, response: u64) -> TraceRecord {
        TraceRecord {
            request_id: id,
            arrival_slot: arrival,
            prompt_tokens: prompt,
            response_tokens: response,
        }
    }

    fn trace(records: Vec<TraceRecord>) -> Trace {
        Trace {
            records,
            metadata: Vec::new(),
        }
    }

    #[test]
    fn opt_examples() {
        let g = growth(100);
        assert_eq!(opt_lower_bound(&trace(vec![]), &g, 10).unwrap().opt, 0);
        let one = opt_lower_bound(&trace(vec![rec(1, 0, 10, 5)]), &g, 10).unwrap();
        assert_eq!(one.opt, 1);
        assert!(one.exact);
        // Slot 0: {60, 60}; slot 1 onward the first one is gone and a 40 remains.
        let two = trace(vec![rec(1, 0, 60, 1), rec(2, 0, 60, 3), rec(3, 1, 40, 2)]);
        let r = opt_lower_bound(&two, &g, 5).unwrap();
        assert_eq!(r.per_slot[0].bins, 2);
        assert_eq!(r.opt, 2);
    }

    #[test]
    fn oversized_slots_use_volume_bound() {
        let records = (0..25).map(|i| rec(i, 0, 10, 1)).collect();
        let r = opt_lower_bound(&trace(records), &growth(100), 1).unwrap();
        assert!(!r.exact);
        assert_eq!(r.opt, 3);
    }

    #[test]
    fn competitive_examples() {
        let opt = |o| OptReport {
            per_slot: Vec::new(),
            opt: o,
            exact: true,
        };
        assert!(competitive_check_peak(4, &opt(3), 4).pass);
        assert!(!competitive_check_peak(10, &opt(3), 4).pass);
        assert_eq!(competitive_bound(3, 4), 8);
        assert_eq!(competitive_bound(4, 0), 6);
    }

    fn put(c: &mut ClusterState, gpu: GpuId, id: u64, size: u64) {
        c.admit(Request::new(id, 0, 1, 1, 1).unwrap(), size).unwrap();
        c.place(ItemId::Request(RequestId(id)), gpu).unwrap();
    }

    #[test]
    fn weight_audit_examples() {
        let empty = weight_audit(&ClusterState::new(120, 8));
        assert_eq!(empty.total_weight, "0");
        assert!(empty.count_bound_holds && empty.table_holds);

        let mut c = ClusterState::new(120, 8);
        let g = c.activate_gpu();
        put(&mut c, g, 1, 70);
        put(&mut c, g, 2, 45);
        let a = weight_audit(&c);
        assert_eq!(a.rows[0].composition, "LM");
        assert_eq!(a.rows[0].weight, "4/3");
        assert_eq!(a.combined_l, 1);
        assert!(a.table_holds);

        let mut c = ClusterState::new(120, 8);
        let g = c.activate_gpu();
        for id in 1..=3 {
            put(&mut c, g, id, 35);
        }
        let a = weight_audit(&c);
        assert_eq!(a.rows[0].composition, "SSS");
        assert_eq!(a.total_weight, "1");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn exact_matches_exhaustive(cap in 8u64..64, raw in proptest::collection::vec(1u64..1000, 0..=8)) {
            let sizes: Vec<u64> = raw.iter().map(|s| 1 + s % cap).collect();
            prop_assert_eq!(exact_bin_pack(&sizes, cap).unwrap(), exhaustive_bin_pack(&sizes, cap).unwrap());
        }

        #[test]
        fn opt_is_monotone(
            base in proptest::collection::vec((0u64..6, 1u64..60, 1u64..6), 0..8),
            extra in (0u64..6, 1u64..60, 1u64..6),
        ) {
            let g = growth(100);
            let mut records: Vec<TraceRecord> = base
                .iter()
                .enumerate()
                .map(|(i, &(a, p, r))| rec(i as u64, a, p, r))
                .collect();
            let before = opt_lower_bound(&trace(records.clone()), &g, 12).unwrap().opt;
            records.push(rec(100, extra.0, extra.1, extra.2));
            let after = opt_lower_bound(&trace(records), &g, 12).unwrap().opt;
            prop_assert!(after >= before);
        }
    }
}
