//! Verification sweeps: structural invariants and migration bounds under random
//! operations, batching against one-by-one replay, the competitive bound against the
//! exact oracle, the migration planner's budgets, scheduler comparisons and
//! reproducibility. Each sweep returns its measurements; [`Check`] turns them into a
//! named pass/fail line for the report.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Config, SchedulerKind};
use crate::error::Result;
use crate::migration::{consensus_order, load_boundaries, plan_hybrid, PendingMove, Topology, TransferMode};
use crate::model::{ClusterState, GpuId, ItemId, Request, RequestId};
use crate::oracle::{competitive_check, opt_lower_bound, weight_audit, CompetitiveCheck};
use crate::scheduler::{current_violations, EpochEvents, MellScheduler, PriorityConfig, Scheduler};
use crate::sim::{self, Growth};
use crate::workload::{gen_poisson, Trace, TraceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub values: Value,
}

impl Check {
    pub fn new(name: &str, pass: bool, values: Value) -> Self {
        Self {
            name: name.into(),
            pass,
            values,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.values)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&json!({ "pass": self.pass(), "checks": self.checks }))?)
    }
}

// ---- random operations -----------------------------------------------------

/// Capacity used by the operation sweeps.
pub const SWEEP_CAPACITY: u64 = 1200;

/// Random allocate/depart/grow events over a live cluster. Sizes are drawn uniformly
/// from a uniformly chosen class, so every class and the Tiny groups are exercised.
pub struct OpStream {
    rng: ChaCha8Rng,
    capacity: u64,
    live: Vec<RequestId>,
    next: u64,
}

impl OpStream {
    pub fn new(seed: u64, capacity: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            capacity,
            live: Vec::new(),
            next: 0,
        }
    }

    fn random_size(&mut self) -> u64 {
        let c = self.capacity;
        let (lo, hi) = match self.rng.random_range(0..5) {
            0 => (c / 2 + 1, c),
            1 => (c / 3 + 1, c / 2),
            2 => (c / 4 + 1, c / 3),
            3 => (c / 8 + 1, c / 4),
            _ => (1, c / 8),
        };
        self.rng.random_range(lo.max(1)..=hi.max(1))
    }

    /// Draws up to `max_ops` events, admitting arrivals and applying growth to
    /// `cluster`. A request appears in at most one event per epoch.
    pub fn epoch(&mut self, cluster: &mut ClusterState, max_ops: usize) -> Result<EpochEvents> {
        let mut ev = EpochEvents::default();
        let n = self.rng.random_range(1..=max_ops.max(1));
        let mut touched = Vec::new();
        for _ in 0..n {
            let roll = self.rng.random_range(0..100);
            let idle: Vec<usize> = (0..self.live.len()).filter(|&i| !touched.contains(&self.live[i])).collect();
            if roll < 45 || idle.is_empty() {
                let id = self.next;
                self.next += 1;
                let size = self.random_size();
                cluster.admit(Request::new(id, 0, 1, 1, 1)?, size)?;
                ev.arrivals.push(RequestId(id));
                touched.push(RequestId(id));
            } else if roll < 80 {
                let i = idle[self.rng.random_range(0..idle.len())];
                let r = self.live.swap_remove(i);
                ev.completions.push(r);
                touched.push(r);
            } else {
                let r = self.live[idle[self.rng.random_range(0..idle.len())]];
                let size = cluster.request_size(r).unwrap_or(1);
                let grown = (size + self.rng.random_range(1..=size / 2 + 1)).min(self.capacity);
                cluster.set_size(r, grown)?;
                ev.updates.push(r);
                touched.push(r);
            }
        }
        self.live.extend(ev.arrivals.iter().copied());
        Ok(ev)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertySweep {
    pub seeds: u64,
    pub operations: usize,
    pub violations: usize,
    pub first_violation: Option<String>,
    /// Operations over their migration bound, keyed by kind and class.
    pub bound_exceedances: BTreeMap<String, usize>,
    /// Largest migration count seen, keyed by kind and class.
    pub max_migrations: BTreeMap<String, usize>,
    pub failed_operations: usize,
    /// Audits where a GPU's weight left the table or the non-T GPU count exceeded W + c.
    pub weight_failures: usize,
    pub elapsed_s: f64,
}

impl PropertySweep {
    pub fn check(&self) -> Check {
        Check::new(
            "properties",
            self.violations == 0 && self.failed_operations == 0,
            json!({ "seeds": self.seeds, "operations": self.operations, "violations": self.violations,
                    "failed_operations": self.failed_operations, "first": self.first_violation,
                    "elapsed_s": self.elapsed_s }),
        )
    }

    pub fn bound_check(&self) -> Check {
        let over: usize = self.bound_exceedances.values().sum();
        Check::new(
            "migration-bounds",
            over == 0,
            json!({ "operations": self.operations, "exceedances": self.bound_exceedances,
                    "max_migrations": self.max_migrations }),
        )
    }

    pub fn weight_check(&self) -> Check {
        Check::new(
            "weight-audit",
            self.weight_failures == 0,
            json!({ "operations": self.operations, "failures": self.weight_failures }),
        )
    }
}

/// Unbatched Mell under `ops` random single-event epochs per seed, checking the
/// invariants, the per-operation bound and the weight audit after every operation.
pub fn property_sweep(seeds: std::ops::Range<u64>, ops: usize) -> Result<PropertySweep> {
    let start = Instant::now();
    let mut out = PropertySweep {
        seeds: seeds.end.saturating_sub(seeds.start),
        ..PropertySweep::default()
    };
    for seed in seeds {
        let mut c = ClusterState::new(SWEEP_CAPACITY, 8);
        let mut s = MellScheduler::new(PriorityConfig::default(), false);
        let mut stream = OpStream::new(seed, SWEEP_CAPACITY);
        for _ in 0..ops {
            let ev = stream.epoch(&mut c, 1)?;
            let step = s.step(&mut c, &ev);
            out.failed_operations += step.events.len();
            for log in &step.logs {
                out.operations += 1;
                let key = format!("{:?} {}", log.kind, log.class.map_or("-".into(), |c| c.to_string()));
                let m = out.max_migrations.entry(key.clone()).or_insert(0);
                *m = (*m).max(log.migrations());
                if !log.within_bound() {
                    *out.bound_exceedances.entry(key).or_insert(0) += 1;
                }
            }
            let v = current_violations(&c);
            if !v.is_empty() && out.first_violation.is_none() {
                out.first_violation = Some(format!("seed {seed}: {} on {} ({})", v[0].property, v[0].gpu, v[0].detail));
            }
            out.violations += v.len();
            let audit = weight_audit(&c);
            if !(audit.table_holds && audit.count_bound_holds) {
                out.weight_failures += 1;
            }
        }
    }
    out.elapsed_s = start.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchingSweep {
    pub seeds: u64,
    pub epochs: usize,
    /// Epochs where the batched plan cost more than replaying the events one by one.
    pub worse_epochs: usize,
    pub batched_migrations: usize,
    pub unbatched_migrations: usize,
    /// Mean per-epoch saving, in migrations.
    pub mean_reduction: f64,
    pub violations: usize,
}

impl BatchingSweep {
    pub fn check(&self) -> Check {
        Check::new(
            "batching-epochs",
            self.worse_epochs == 0 && self.violations == 0 && self.mean_reduction > 0.0,
            serde_json::to_value(self).unwrap_or(Value::Null),
        )
    }
}

/// Multi-event epochs: each is planned both batched and one by one from the same state.
pub fn batching_sweep(seeds: std::ops::Range<u64>, epochs: usize, max_batch: usize) -> Result<BatchingSweep> {
    let mut out = BatchingSweep {
        seeds: seeds.end.saturating_sub(seeds.start),
        ..BatchingSweep::default()
    };
    let mut saved = 0i64;
    for seed in seeds {
        let mut c = ClusterState::new(SWEEP_CAPACITY, 8);
        let mut batched = MellScheduler::new(PriorityConfig::default(), true);
        let mut single = MellScheduler::new(PriorityConfig::default(), false);
        let mut stream = OpStream::new(seed, SWEEP_CAPACITY);
        for _ in 0..epochs {
            let ev = stream.epoch(&mut c, max_batch)?;
            let mut alt = c.clone();
            let u = single.step(&mut alt, &ev).migrations();
            let b = batched.step(&mut c, &ev).migrations();
            out.epochs += 1;
            out.batched_migrations += b;
            out.unbatched_migrations += u;
            saved += u as i64 - b as i64;
            if b > u {
                out.worse_epochs += 1;
            }
            out.violations += current_violations(&c).len();
        }
    }
    out.mean_reduction = if out.epochs == 0 { 0.0 } else { saved as f64 / out.epochs as f64 };
    Ok(out)
}

// ---- competitive ratio -----------------------------------------------------

/// A short trace whose alive set never exceeds `max_concurrency`, with footprints
/// spread over every class of the configured capacity.
pub fn small_trace(seed: u64, growth: &Growth, max_concurrency: usize, arrivals: usize) -> Result<Trace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap_tokens = (growth.capacity / growth.kv_bytes_per_token).max(2);
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut spans: Vec<(u64, u64)> = Vec::new();
    let mut slot = 0u64;
    for id in 0..arrivals as u64 {
        slot += rng.random_range(0..4);
        let frac = [(0.5, 0.95), (0.34, 0.5), (0.26, 0.33), (0.13, 0.25), (0.01, 0.12)][rng.random_range(0..5)];
        let prompt = ((rng.random_range(frac.0..frac.1) * cap_tokens as f64) as u64).max(1);
        let room = (cap_tokens - prompt.min(cap_tokens - 1)).max(1);
        let response = rng.random_range(1..=room.min(cap_tokens / 3).max(1));
        let rec = TraceRecord {
            request_id: id,
            arrival_slot: slot,
            prompt_tokens: prompt,
            response_tokens: response,
        };
        let r = growth.request(&rec)?;
        let span = (growth.boundary_at_or_after(slot), r.completion_slot(growth.tokens_per_slot));
        let overlap = |t: u64| spans.iter().filter(|&&(a, b)| a <= t && t < b).count();
        // Concurrency only rises at a start, so checking the starts inside the new span suffices.
        let peak = std::iter::once(span.0)
            .chain(spans.iter().map(|s| s.0).filter(|&t| span.0 <= t && t < span.1))
            .map(overlap)
            .max()
            .unwrap_or(0);
        if peak < max_concurrency {
            spans.push(span);
            records.push(rec);
        }
    }
    Ok(Trace {
        records,
        metadata: vec![format!("small trace seed={seed} max_concurrency={max_concurrency}")],
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompetitiveSweep {
    pub traces: usize,
    pub failures: usize,
    pub inexact: usize,
    pub max_ratio: f64,
    pub max_alive: usize,
    pub worst: Option<CompetitiveCheck>,
    pub elapsed_s: f64,
}

impl CompetitiveSweep {
    pub fn check(&self) -> Check {
        Check::new(
            "competitive-ratio",
            self.failures == 0 && self.inexact == 0,
            serde_json::to_value(self).unwrap_or(Value::Null),
        )
    }
}

/// Mell's peak against the per-slot exact optimum on `seeds` small traces.
pub fn competitive_sweep(
    base: &Config,
    seeds: std::ops::Range<u64>,
    max_concurrency: usize,
    slack: usize,
) -> Result<CompetitiveSweep> {
    let start = Instant::now();
    let mut cfg = base.clone();
    cfg.scheduler.kind = SchedulerKind::Mell;
    let growth = Growth::from_config(&cfg);
    let mut out = CompetitiveSweep::default();
    for seed in seeds {
        let trace = small_trace(seed, &growth, max_concurrency, 4 * max_concurrency)?;
        let end = trace
            .records
            .iter()
            .map(|r| growth.request(r).map(|q| q.completion_slot(growth.tokens_per_slot)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        cfg.sim.duration_slots = end + 2 * cfg.sim.epoch_slots;
        let result = sim::run(&cfg, &trace)?;
        let opt = opt_lower_bound(&trace, &growth, cfg.sim.duration_slots)?;
        let c = competitive_check(&result.metrics, &opt, slack);
        out.traces += 1;
        out.max_alive = out.max_alive.max(opt.per_slot.iter().map(|s| s.alive).max().unwrap_or(0));
        out.inexact += usize::from(!opt.exact);
        if !c.pass {
            out.failures += 1;
        }
        if out.worst.as_ref().is_none_or(|w| c.ratio > w.ratio) {
            out.max_ratio = c.ratio;
            out.worst = Some(c);
        }
    }
    out.elapsed_s = start.elapsed().as_secs_f64();
    Ok(out)
}

// ---- migration planner -----------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlannerSweep {
    pub plans: usize,
    pub moves: usize,
    pub kv_transfers: usize,
    pub token_transfers: usize,
    pub deferred: usize,
    pub forced: usize,
    /// Budgets exceeded by moves that were not forced.
    pub unflagged_overruns: usize,
    pub shuffles: usize,
    pub order_mismatches: usize,
}

impl PlannerSweep {
    pub fn check(&self) -> Check {
        Check::new(
            "planner-budgets",
            self.unflagged_overruns == 0 && self.order_mismatches == 0,
            serde_json::to_value(self).unwrap_or(Value::Null),
        )
    }
}

fn random_moves(rng: &mut ChaCha8Rng, gpus: u32) -> Vec<PendingMove> {
    let n = rng.random_range(1..40);
    (0..n)
        .map(|i| {
            let src = rng.random_range(0..gpus);
            let dst = (src + rng.random_range(1..gpus)) % gpus;
            let tokens = rng.random_range(1..20_000u64);
            PendingMove {
                item: ItemId::Request(RequestId(i)),
                src: GpuId(src),
                dst: GpuId(dst),
                kv_bytes: tokens * rng.random_range(1..(1u64 << 20)),
                tokens,
                deferrals: rng.random_range(0..5),
            }
        })
        .collect()
}

/// Random move sets under tight random budgets; every budget must hold except where a
/// forced transfer was flagged. Each set is also shuffled `shuffles_per_plan` times and
/// must come back in the same consensus order.
pub fn planner_sweep(seeds: std::ops::Range<u64>, shuffles_per_plan: usize, max_defer: u32) -> Result<PlannerSweep> {
    let mut out = PlannerSweep::default();
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = Topology {
            gpus_per_machine: rng.random_range(1..5),
            ..Topology::default()
        };
        let gpus = rng.random_range(2..12u32);
        let ids: Vec<GpuId> = (0..gpus).map(GpuId).collect();
        let fraction = rng.random_range(0.001..1.0);
        let epoch_s = rng.random_range(0.001..0.5);
        let b = load_boundaries(&topo, &ids, epoch_s, fraction)?;
        let moves = random_moves(&mut rng, gpus);
        let plan = plan_hybrid(&moves, &b, &topo, max_defer)?;
        out.plans += 1;
        out.moves += moves.len();
        out.kv_transfers += plan.count(TransferMode::KvTransfer);
        out.token_transfers += plan.count(TransferMode::TokenTransfer);
        out.deferred += plan.count(TransferMode::Deferred);
        out.forced += plan.forced();
        let mut link_bytes: BTreeMap<_, u64> = BTreeMap::new();
        let mut dest_tokens: BTreeMap<GpuId, u64> = BTreeMap::new();
        for a in plan.assignments.iter().filter(|a| !a.forced) {
            match a.mode {
                TransferMode::KvTransfer => *link_bytes.entry(topo.link(a.mv.src, a.mv.dst)).or_insert(0) += a.mv.kv_bytes,
                TransferMode::TokenTransfer => *dest_tokens.entry(a.mv.dst).or_insert(0) += a.mv.tokens,
                TransferMode::Deferred => {}
            }
        }
        out.unflagged_overruns += link_bytes
            .iter()
            .filter(|(l, &used)| used > b.comm_budget.get(l).copied().unwrap_or(0))
            .count();
        out.unflagged_overruns += dest_tokens
            .iter()
            .filter(|(g, &used)| used > b.comp_budget.get(g).copied().unwrap_or(0))
            .count();
        if plan.forced() != plan.events.len() {
            out.unflagged_overruns += 1;
        }
        let canonical = consensus_order(&moves);
        let mut shuffled = moves.clone();
        for _ in 0..shuffles_per_plan {
            shuffled.shuffle(&mut rng);
            out.shuffles += 1;
            if consensus_order(&shuffled) != canonical {
                out.order_mismatches += 1;
            }
        }
    }
    Ok(out)
}

// ---- scheduler comparison --------------------------------------------------

pub const SWEEP_SCHEDULERS: [(SchedulerKind, bool); 5] = [
    (SchedulerKind::Mell, true),
    (SchedulerKind::Mell, false),
    (SchedulerKind::Bf, true),
    (SchedulerKind::Wf, true),
    (SchedulerKind::Lb, true),
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub mean_peak_gpus: f64,
    pub mean_utilization: f64,
    pub mean_migrations: f64,
    pub total_migrations: usize,
    pub budget_overruns: usize,
    pub forced_transfers: usize,
    pub peaks: Vec<usize>,
    pub migrations: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSweep {
    pub seeds: u64,
    pub mean_interarrival_slots: f64,
    pub min_requests: usize,
    pub by_scheduler: BTreeMap<String, SchedulerStats>,
    pub elapsed_s: f64,
}

impl SchedulerSweep {
    fn stats(&self, label: &str) -> SchedulerStats {
        self.by_scheduler.get(label).cloned().unwrap_or_default()
    }

    /// Mean peak mell ≤ lb ≤ max(bf, wf), at least `min_gain` relative reduction
    /// against bf and wf, and the highest mean utilization.
    pub fn dominance_check(&self, min_gain: f64) -> Check {
        let (mell, lb, bf, wf) = (self.stats("mell"), self.stats("lb"), self.stats("bf"), self.stats("wf"));
        let gain = |other: &SchedulerStats| {
            if other.mean_peak_gpus == 0.0 {
                0.0
            } else {
                1.0 - mell.mean_peak_gpus / other.mean_peak_gpus
            }
        };
        let (gain_bf, gain_wf) = (gain(&bf), gain(&wf));
        let util_best = [&lb, &bf, &wf].iter().all(|o| mell.mean_utilization > o.mean_utilization);
        let pass = mell.mean_peak_gpus <= lb.mean_peak_gpus
            && lb.mean_peak_gpus <= bf.mean_peak_gpus.max(wf.mean_peak_gpus)
            && gain_bf >= min_gain
            && gain_wf >= min_gain
            && util_best;
        let peaks: BTreeMap<&String, f64> = self.by_scheduler.iter().map(|(k, v)| (k, v.mean_peak_gpus)).collect();
        let utils: BTreeMap<&String, f64> = self.by_scheduler.iter().map(|(k, v)| (k, v.mean_utilization)).collect();
        Check::new(
            "baseline-dominance",
            pass,
            json!({ "seeds": self.seeds, "min_requests": self.min_requests, "mean_peak": peaks,
                    "mean_utilization": utils, "reduction_vs_bf": gain_bf, "reduction_vs_wf": gain_wf }),
        )
    }

    /// Batched Mell migrates no more than unbatched on every run, and less on average.
    pub fn ablation_check(&self) -> Check {
        let (b, u) = (self.stats("mell"), self.stats("mell-unbatched"));
        let every = b.migrations.len() == u.migrations.len()
            && b.migrations.iter().zip(&u.migrations).all(|(x, y)| x <= y);
        let reduction = u.mean_migrations - b.mean_migrations;
        Check::new(
            "batching-runs",
            every && reduction > 0.0 && !b.migrations.is_empty(),
            json!({ "batched": b.migrations, "unbatched": u.migrations, "mean_reduction": reduction }),
        )
    }

    pub fn fit_check(&self) -> Check {
        let (bf, wf) = (self.stats("bf"), self.stats("wf"));
        Check::new(
            "fit-baselines-static",
            bf.total_migrations == 0 && wf.total_migrations == 0,
            json!({ "bf": bf.total_migrations, "wf": wf.total_migrations }),
        )
    }

    pub fn budget_check(&self) -> Check {
        let overruns: usize = self.by_scheduler.values().map(|s| s.budget_overruns).sum();
        let forced: usize = self.by_scheduler.values().map(|s| s.forced_transfers).sum();
        Check::new("sim-budgets", overruns == 0, json!({ "overruns": overruns, "forced": forced }))
    }
}

/// Poisson arrivals for `arrival_slots` slots per seed, replayed under every scheduler
/// in [`SWEEP_SCHEDULERS`]. The run continues `drain_slots` past the last arrival.
pub fn scheduler_sweep(
    base: &Config,
    seeds: std::ops::Range<u64>,
    arrival_slots: u64,
    drain_slots: u64,
) -> Result<SchedulerSweep> {
    let start = Instant::now();
    let mut out = SchedulerSweep {
        seeds: seeds.end.saturating_sub(seeds.start),
        mean_interarrival_slots: base.workload.mean_interarrival_slots,
        min_requests: usize::MAX,
        ..SchedulerSweep::default()
    };
    for seed in seeds {
        let trace = gen_poisson(base.workload.mean_interarrival_slots, arrival_slots, &base.workload.lengths, seed)?;
        out.min_requests = out.min_requests.min(trace.len());
        for (kind, batching) in SWEEP_SCHEDULERS {
            let mut cfg = base.clone();
            cfg.scheduler.kind = kind;
            cfg.scheduler.batching = batching;
            cfg.sim.seed = seed;
            cfg.sim.duration_slots = arrival_slots + drain_slots;
            let r = sim::run(&cfg, &trace)?;
            let s = out.by_scheduler.entry(cfg.scheduler.label()).or_default();
            s.peaks.push(r.summary.peak_gpus);
            s.migrations.push(r.summary.total_migrations);
            s.total_migrations += r.summary.total_migrations;
            s.budget_overruns += r.summary.budget_overruns;
            s.forced_transfers += r.summary.forced_transfers;
            s.mean_utilization += r.summary.mean_utilization;
        }
    }
    for s in out.by_scheduler.values_mut() {
        let n = s.peaks.len().max(1) as f64;
        s.mean_peak_gpus = s.peaks.iter().sum::<usize>() as f64 / n;
        s.mean_migrations = s.migrations.iter().sum::<usize>() as f64 / n;
        s.mean_utilization /= n;
    }
    if out.min_requests == usize::MAX {
        out.min_requests = 0;
    }
    out.elapsed_s = start.elapsed().as_secs_f64();
    Ok(out)
}

// ---- reproducibility -------------------------------------------------------

/// Runs `cfg` twice on `trace` and compares the metrics CSV and summary JSON bytes.
pub fn determinism_check(cfg: &Config, trace: &Trace) -> Result<Check> {
    let render = || -> Result<(Vec<u8>, String)> {
        let r = sim::run(cfg, trace)?;
        let mut csv = Vec::new();
        r.metrics.write_csv(&mut csv)?;
        Ok((csv, r.summary_json()?))
    };
    let (a, b) = (render()?, render()?);
    Ok(Check::new(
        "determinism",
        a == b,
        json!({ "csv_bytes": a.0.len(), "json_bytes": a.1.len(), "csv_equal": a.0 == b.0, "json_equal": a.1 == b.1 }),
    ))
}

/// The suite run by `kvpack verify`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seeds: u64,
    pub ops_per_seed: usize,
    pub max_concurrency: usize,
    pub slack: usize,
    pub shuffles: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 50,
            ops_per_seed: 2000,
            max_concurrency: 12,
            slack: crate::oracle::DEFAULT_SLACK,
            shuffles: 200,
        }
    }
}

/// Property, bound, weight, batching, competitive, planner and determinism checks.
pub fn run_suite(cfg: &Config, opts: &SuiteOptions) -> Result<Report> {
    let mut report = Report::default();
    let props = property_sweep(0..opts.seeds, opts.ops_per_seed)?;
    report.checks.push(props.check());
    report.checks.push(props.bound_check());
    report.checks.push(props.weight_check());
    report.checks.push(batching_sweep(0..opts.seeds, opts.ops_per_seed / 10, 6)?.check());
    report
        .checks
        .push(competitive_sweep(cfg, 0..opts.seeds.max(1) * 4, opts.max_concurrency, opts.slack)?.check());
    report
        .checks
        .push(planner_sweep(0..opts.seeds * 20, opts.shuffles, cfg.migration.max_defer)?.check());
    let growth = Growth::from_config(cfg);
    let trace = small_trace(0, &growth, 3 * opts.max_concurrency, 20 * opts.max_concurrency)?;
    let mut det = cfg.clone();
    det.sim.duration_slots = det.sim.duration_slots.min(1000);
    report.checks.push(determinism_check(&det, &trace)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_stream_is_deterministic_and_consistent() {
        let mut a = ClusterState::new(SWEEP_CAPACITY, 8);
        let mut b = ClusterState::new(SWEEP_CAPACITY, 8);
        let (mut sa, mut sb) = (OpStream::new(3, SWEEP_CAPACITY), OpStream::new(3, SWEEP_CAPACITY));
        for _ in 0..50 {
            let ea = sa.epoch(&mut a, 4).unwrap();
            let eb = sb.epoch(&mut b, 4).unwrap();
            assert_eq!(ea, eb);
            let mut seen: Vec<RequestId> = ea.arrivals.iter().chain(&ea.completions).chain(&ea.updates).copied().collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), ea.len());
            for r in &ea.completions {
                a.retire(*r).unwrap();
                b.retire(*r).unwrap();
            }
        }
    }

    #[test]
    fn small_sweeps_pass() {
        let p = property_sweep(0..2, 300).unwrap();
        assert!(p.check().pass, "{}", p.check().line());
        assert!(p.bound_check().pass, "{}", p.bound_check().line());
        assert!(p.weight_check().pass, "{}", p.weight_check().line());
        let b = batching_sweep(0..2, 100, 5).unwrap();
        assert_eq!(b.worse_epochs, 0);
        let pl = planner_sweep(0..30, 20, 3).unwrap();
        assert!(pl.check().pass, "{}", pl.check().line());
    }

    #[test]
    fn small_traces_respect_concurrency() {
        let g = Growth::from_config(&Config::default());
        for seed in 0..20 {
            let t = small_trace(seed, &g, 5, 30).unwrap();
            let opt = opt_lower_bound(&t, &g, 2000).unwrap();
            assert!(opt.per_slot.iter().all(|s| s.alive <= 5));
            assert!(t.validate().is_ok());
        }
    }

    #[test]
    fn competitive_sweep_on_a_few_traces() {
        let s = competitive_sweep(&Config::default(), 0..5, 8, 4).unwrap();
        assert_eq!(s.traces, 5);
        assert!(s.check().pass, "{}", s.check().line());
    }

    #[test]
    fn report_serializes() {
        let mut r = Report::default();
        r.checks.push(Check::new("x", true, json!({"a": 1})));
        assert!(r.pass());
        assert!(r.to_json().unwrap().contains("\"pass\": true"));
        r.checks.push(Check::new("y", false, Value::Null));
        assert!(!r.pass());
        assert!(r.checks[1].line().starts_with("FAIL y"));
    }
}
