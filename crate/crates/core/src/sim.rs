//! Discrete-time simulation: requests grow every slot, and at each epoch boundary
//! the scheduler reacts to arrivals, completions and growth. Its migrations then go
//! through the hybrid planner; moves that do not fit this epoch's budgets stay in
//! flight and keep their source GPU busy until they are carried out.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::migration::{load_boundaries, plan_hybrid, PendingMove, PlanEvent, TransferMode};
use crate::model::{kv_size_at, ClusterState, GpuId, ItemId, Request, RequestId, SizeClass};
use crate::scheduler::{EpochEvents, SchedEvent, Scheduler};
use crate::workload::Trace;

pub use crate::config::SCHEMA_VERSION;

/// KV growth rules shared by the simulator and the offline oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Growth {
    pub capacity: u64,
    pub kv_bytes_per_token: u64,
    pub tokens_per_slot: u64,
    pub epoch_slots: u64,
}

impl Growth {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            capacity: cfg.cluster.capacity_bytes,
            kv_bytes_per_token: cfg.cluster.kv_bytes_per_token,
            tokens_per_slot: cfg.sim.tokens_per_slot,
            epoch_slots: cfg.sim.epoch_slots,
        }
    }

    pub fn request(&self, rec: &crate::workload::TraceRecord) -> Result<Request> {
        Request::new(
            rec.request_id,
            rec.arrival_slot,
            rec.prompt_tokens,
            rec.response_tokens,
            self.kv_bytes_per_token,
        )
    }

    /// Whether `slot` is an epoch boundary.
    pub fn is_boundary(&self, slot: u64) -> bool {
        slot % self.epoch_slots.max(1) == 0
    }

    /// The first boundary at or after `slot`.
    pub fn boundary_at_or_after(&self, slot: u64) -> u64 {
        slot.div_ceil(self.epoch_slots.max(1)) * self.epoch_slots.max(1)
    }

    /// Size of `r` if it is running at boundary `slot`: admitted, not yet complete,
    /// and never past capacity.
    pub fn alive_size(&self, r: &Request, slot: u64) -> Option<u64> {
        if slot < self.boundary_at_or_after(r.arrival_slot) || slot >= r.completion_slot(self.tokens_per_slot) {
            return None;
        }
        let size = kv_size_at(r, slot, self.tokens_per_slot).ok()?;
        (size <= self.capacity).then_some(size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotMetrics {
    pub slot: u64,
    pub active_gpus: usize,
    pub migrations: usize,
    pub deferred: usize,
    pub forced: usize,
    pub used_bytes: u64,
    pub capacity_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub slots: Vec<SlotMetrics>,
}

impl MetricsSeries {
    pub fn peak_gpus(&self) -> usize {
        self.slots.iter().map(|s| s.active_gpus).max().unwrap_or(0)
    }

    pub fn total_migrations(&self) -> usize {
        self.slots.iter().map(|s| s.migrations).sum()
    }

    /// Mean of used/capacity over slots with at least one active GPU.
    pub fn mean_utilization(&self) -> f64 {
        let busy: Vec<f64> = self
            .slots
            .iter()
            .filter(|s| s.capacity_bytes > 0)
            .map(|s| s.used_bytes as f64 / s.capacity_bytes as f64)
            .collect();
        if busy.is_empty() {
            0.0
        } else {
            busy.iter().sum::<f64>() / busy.len() as f64
        }
    }

    pub fn mean_active_gpus(&self) -> f64 {
        if self.slots.is_empty() {
            return 0.0;
        }
        self.slots.iter().map(|s| s.active_gpus as f64).sum::<f64>() / self.slots.len() as f64
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "slot",
            "active_gpus",
            "migrations",
            "deferred",
            "forced",
            "used_bytes",
            "capacity_bytes",
        ])?;
        for s in &self.slots {
            w.write_record([
                s.slot.to_string(),
                s.active_gpus.to_string(),
                s.migrations.to_string(),
                s.deferred.to_string(),
                s.forced.to_string(),
                s.used_bytes.to_string(),
                s.capacity_bytes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    /// The request's KV cache outgrew a whole GPU (or never fit) and was dropped.
    Aborted { slot: u64, request: RequestId, size: u64 },
    OperationFailed { slot: u64, request: RequestId, message: String },
    ForcedKvTransfer { slot: u64, item: ItemId, deferrals: u32 },
    /// A migration planned this epoch used more than its budget without being forced.
    BudgetExceeded { slot: u64, resource: String, used: u64, budget: u64 },
    CeilingExceeded { slot: u64, active_gpus: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub scheduler: String,
    pub batching: bool,
    pub slots: u64,
    pub peak_gpus: usize,
    pub mean_active_gpus: f64,
    pub mean_utilization: f64,
    pub total_migrations: usize,
    pub migrations_per_second: f64,
    pub kv_transfers: usize,
    pub token_transfers: usize,
    pub deferrals: usize,
    pub forced_transfers: usize,
    pub budget_overruns: usize,
    pub mean_migration_latency_s: f64,
    /// Scheduler operations whose migrations exceeded their per-kind bound.
    pub bound_exceedances: usize,
    pub arrived: usize,
    pub completed: usize,
    pub aborted: usize,
    pub running_at_end: usize,
    pub failed_operations: usize,
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub metrics: MetricsSeries,
    pub summary: Summary,
    pub events: Vec<SimEvent>,
    /// Migrations the scheduler asked for at each epoch boundary, before planning.
    pub epoch_migrations: Vec<usize>,
}

impl SimResult {
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }
}

/// A migration the scheduler decided on whose bytes have not moved yet.
#[derive(Debug, Clone, Copy)]
struct InFlight {
    src: GpuId,
    deferrals: u32,
}

struct Sim<'a> {
    cfg: &'a Config,
    growth: Growth,
    cluster: ClusterState,
    scheduler: Box<dyn Scheduler>,
    in_flight: BTreeMap<ItemId, InFlight>,
    events: Vec<SimEvent>,
    summary_counts: Counts,
    epoch_migrations: Vec<usize>,
}

#[derive(Default)]
struct Counts {
    arrived: usize,
    completed: usize,
    aborted: usize,
    failed: usize,
    kv: usize,
    token: usize,
    deferrals: usize,
    forced: usize,
    overruns: usize,
    latency_sum: f64,
    executed: usize,
    bound_exceedances: usize,
}

/// Runs `trace` under `cfg` with the scheduler the config names.
pub fn run(cfg: &Config, trace: &Trace) -> Result<SimResult> {
    cfg.validate()?;
    trace.validate()?;
    let growth = Growth::from_config(cfg);
    let mut sim = Sim {
        cfg,
        growth,
        cluster: ClusterState::new(cfg.cluster.capacity_bytes, cfg.cluster.topology.gpus_per_machine),
        scheduler: cfg.scheduler.build(),
        in_flight: BTreeMap::new(),
        events: Vec::new(),
        summary_counts: Counts::default(),
        epoch_migrations: Vec::new(),
    };
    let mut metrics = MetricsSeries::default();
    let mut next = 0;
    for slot in 0..cfg.sim.duration_slots {
        let mut row = SlotMetrics {
            slot,
            active_gpus: 0,
            migrations: 0,
            deferred: 0,
            forced: 0,
            used_bytes: 0,
            capacity_bytes: 0,
        };
        if growth.is_boundary(slot) {
            let mut arrivals = Vec::new();
            while next < trace.records.len() && trace.records[next].arrival_slot <= slot {
                arrivals.push(trace.records[next]);
                next += 1;
            }
            sim.epoch(slot, &arrivals, &mut row)?;
        }
        sim.fill_usage(&mut row);
        if let Some(ceiling) = cfg.cluster.max_gpus {
            if row.active_gpus > ceiling as usize {
                sim.events.push(SimEvent::CeilingExceeded {
                    slot,
                    active_gpus: row.active_gpus,
                });
            }
        }
        metrics.slots.push(row);
    }
    // Requests still arriving after the horizon are never admitted.
    let running = sim.cluster.requests().count();
    let c = &sim.summary_counts;
    debug_assert_eq!(c.arrived, c.completed + c.aborted + running);
    let seconds = cfg.sim.duration_slots as f64 * cfg.sim.slot_seconds;
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        scheduler: sim.scheduler.name().to_string(),
        batching: cfg.scheduler.batching && cfg.scheduler.kind == crate::config::SchedulerKind::Mell,
        slots: cfg.sim.duration_slots,
        peak_gpus: metrics.peak_gpus(),
        mean_active_gpus: metrics.mean_active_gpus(),
        mean_utilization: metrics.mean_utilization(),
        total_migrations: metrics.total_migrations(),
        migrations_per_second: if seconds > 0.0 {
            metrics.total_migrations() as f64 / seconds
        } else {
            0.0
        },
        kv_transfers: c.kv,
        token_transfers: c.token,
        deferrals: c.deferrals,
        forced_transfers: c.forced,
        budget_overruns: c.overruns,
        mean_migration_latency_s: if c.executed > 0 {
            c.latency_sum / c.executed as f64
        } else {
            0.0
        },
        bound_exceedances: c.bound_exceedances,
        arrived: c.arrived,
        completed: c.completed,
        aborted: c.aborted,
        running_at_end: running,
        failed_operations: c.failed,
        config: cfg.clone(),
    };
    Ok(SimResult {
        metrics,
        summary,
        events: sim.events,
        epoch_migrations: sim.epoch_migrations,
    })
}

impl Sim<'_> {
    fn fill_usage(&self, row: &mut SlotMetrics) {
        let mut active: BTreeSet<GpuId> = self.cluster.gpu_ids().into_iter().collect();
        active.extend(self.in_flight.values().map(|f| f.src));
        row.active_gpus = active.len();
        row.used_bytes = self.cluster.total_used_bytes();
        row.capacity_bytes = active.len() as u64 * self.cluster.capacity();
    }

    fn abort(&mut self, slot: u64, r: RequestId, size: u64) {
        self.summary_counts.aborted += 1;
        self.events.push(SimEvent::Aborted { slot, request: r, size });
    }

    fn epoch(&mut self, slot: u64, arrivals: &[crate::workload::TraceRecord], row: &mut SlotMetrics) -> Result<()> {
        let g = self.growth;
        let cap = g.capacity;
        let mut ev = EpochEvents::default();
        let mut aborted = BTreeMap::new();

        // Completions first, then growth of the survivors.
        let running: Vec<(RequestId, Request)> =
            self.cluster.requests().map(|t| (t.request.id, t.request.clone())).collect();
        let mut grown = Vec::new();
        for (id, req) in &running {
            if slot >= req.completion_slot(g.tokens_per_slot) {
                ev.completions.push(*id);
                continue;
            }
            let size = kv_size_at(req, slot, g.tokens_per_slot)?;
            if size > cap {
                // Cannot be held anywhere: drop it through the scheduler like a completion.
                ev.completions.push(*id);
                aborted.insert(*id, size);
                continue;
            }
            if self.cluster.request_size(*id) != Some(size) {
                self.cluster.set_size(*id, size)?;
                grown.push(*id);
            }
        }
        let departing: BTreeSet<RequestId> = ev.completions.iter().copied().collect();
        let mut updates = BTreeSet::new();
        let mut overloaded = BTreeSet::new();
        for &id in &grown {
            let t = self.cluster.request(id).expect("running");
            let now = self.cluster.classify(t.size);
            let group_too_big = t
                .group
                .and_then(|gid| self.cluster.group(gid))
                .is_some_and(|grp| 4 * grp.aggregate_bytes as u128 > cap as u128);
            let class_changed = if t.group.is_some() {
                now != SizeClass::Tiny
            } else {
                now != t.class
            };
            if class_changed || group_too_big {
                updates.insert(id);
            }
        }
        for gpu in self.cluster.gpu_ids() {
            let live: u64 = self
                .cluster
                .residents(gpu)
                .into_iter()
                .map(|i| match i {
                    ItemId::Request(r) if departing.contains(&r) => 0,
                    ItemId::Group(gid) => self.cluster.group(gid).map_or(0, |grp| {
                        grp.members
                            .iter()
                            .filter(|m| !departing.contains(m))
                            .filter_map(|m| self.cluster.request_size(*m))
                            .sum()
                    }),
                    _ => self.cluster.item_size(i),
                })
                .sum();
            if live > cap {
                overloaded.insert(gpu);
            }
        }
        for gpu in overloaded {
            if self.cluster.residents(gpu).iter().any(|i| match i {
                ItemId::Request(r) => updates.contains(r),
                ItemId::Group(gid) => self
                    .cluster
                    .group(*gid)
                    .is_some_and(|grp| grp.members.iter().any(|m| updates.contains(m))),
            }) {
                continue;
            }
            // Let the largest grown request on the GPU trigger the overload repair.
            let pick = grown
                .iter()
                .filter(|r| !departing.contains(r) && self.cluster.gpu_of_request(**r) == Some(gpu))
                .max_by_key(|r| (self.cluster.request_size(**r), std::cmp::Reverse(**r)));
            if let Some(&r) = pick {
                updates.insert(r);
            }
        }
        ev.updates = updates.into_iter().collect();

        for rec in arrivals {
            let req = g.request(rec)?;
            self.summary_counts.arrived += 1;
            let size = kv_size_at(&req, slot, g.tokens_per_slot)?;
            if size > cap || slot >= req.completion_slot(g.tokens_per_slot) {
                if size > cap {
                    self.abort(slot, req.id, size);
                } else {
                    // Finished before it was ever scheduled.
                    self.summary_counts.completed += 1;
                }
                continue;
            }
            self.cluster.admit(req.clone(), size)?;
            ev.arrivals.push(req.id);
        }

        let out = self.scheduler.step(&mut self.cluster, &ev);

        for e in &out.events {
            let SchedEvent::OperationFailed { request, message } = e;
            self.summary_counts.failed += 1;
            warn!("slot {slot}: {request}: {message}");
            self.events.push(SimEvent::OperationFailed {
                slot,
                request: *request,
                message: message.clone(),
            });
        }
        self.summary_counts.bound_exceedances += out.logs.iter().filter(|l| !l.within_bound()).count();
        for r in &ev.completions {
            if self.cluster.request(*r).is_some() {
                // The scheduler could not remove it; force it out so accounting stays exact.
                if let Some(item) = self.cluster.item_of(*r) {
                    if let ItemId::Group(_) = item {
                        self.cluster.leave_group(*r);
                    } else {
                        self.cluster.unplace(item);
                    }
                }
                self.cluster.retire(*r)?;
            }
            if let Some(&size) = aborted.get(r) {
                self.abort(slot, *r, size);
            } else {
                self.summary_counts.completed += 1;
            }
        }
        for r in self.cluster.unplaced_requests() {
            // Arrivals the scheduler failed to place cannot run.
            let size = self.cluster.request_size(r).unwrap_or(0);
            self.cluster.retire(r)?;
            self.abort(slot, r, size);
        }
        self.cluster.terminate_empty();

        self.migrate(slot, &out, row)
    }

    fn migrate(&mut self, slot: u64, out: &crate::scheduler::StepOutcome, row: &mut SlotMetrics) -> Result<()> {
        // Net effect per item this epoch: where it was physically, where it must go.
        let mut wanted: BTreeMap<ItemId, (GpuId, GpuId)> = BTreeMap::new();
        for m in out.moves() {
            let Some(src) = m.src else { continue };
            wanted
                .entry(m.item)
                .and_modify(|e| e.1 = m.dst)
                .or_insert((src, m.dst));
        }
        self.epoch_migrations.push(wanted.values().filter(|(s, d)| s != d).count());

        let mut pending = Vec::new();
        let mut next_in_flight = BTreeMap::new();
        let items: BTreeSet<ItemId> = wanted.keys().chain(self.in_flight.keys()).copied().collect();
        for item in items {
            let Some(dst) = self.cluster.item_gpu(item) else {
                continue; // departed or dissolved
            };
            let (src, deferrals) = match self.in_flight.get(&item) {
                Some(f) => (f.src, f.deferrals),
                None => (wanted[&item].0, 0),
            };
            if src == dst {
                continue;
            }
            pending.push(PendingMove {
                item,
                src,
                dst,
                kv_bytes: self.cluster.item_size(item),
                tokens: self.tokens_of(item, slot),
                deferrals,
            });
        }
        if pending.is_empty() {
            self.in_flight = next_in_flight;
            return Ok(());
        }
        let mut gpus: BTreeSet<GpuId> = self.cluster.gpu_ids().into_iter().collect();
        gpus.extend(pending.iter().flat_map(|m| [m.src, m.dst]));
        let gpus: Vec<GpuId> = gpus.into_iter().collect();
        let topo = &self.cfg.cluster.topology;
        let b = load_boundaries(topo, &gpus, self.cfg.epoch_seconds(), self.cfg.migration.budget_fraction)?;
        let plan = plan_hybrid(&pending, &b, topo, self.cfg.migration.max_defer)?;
        for a in &plan.assignments {
            match a.mode {
                TransferMode::Deferred => {
                    row.deferred += 1;
                    self.summary_counts.deferrals += 1;
                    next_in_flight.insert(
                        a.mv.item,
                        InFlight {
                            src: a.mv.src,
                            deferrals: a.mv.deferrals + 1,
                        },
                    );
                }
                mode => {
                    row.migrations += 1;
                    self.summary_counts.executed += 1;
                    self.summary_counts.latency_sum += a.latency_s;
                    if mode == TransferMode::KvTransfer {
                        self.summary_counts.kv += 1;
                    } else {
                        self.summary_counts.token += 1;
                    }
                }
            }
        }
        for e in &plan.events {
            let PlanEvent::ForcedKvTransfer { item, deferrals } = *e;
            row.forced += 1;
            self.summary_counts.forced += 1;
            self.events.push(SimEvent::ForcedKvTransfer { slot, item, deferrals });
        }
        if plan.forced() == 0 {
            for (resource, used, budget) in plan.overruns(&b) {
                self.summary_counts.overruns += 1;
                self.events.push(SimEvent::BudgetExceeded {
                    slot,
                    resource,
                    used,
                    budget,
                });
            }
        }
        debug!(
            "slot {slot}: {} migrations, {} deferred, {} forced",
            row.migrations, row.deferred, row.forced
        );
        self.in_flight = next_in_flight;
        Ok(())
    }

    fn tokens_of(&self, item: ItemId, slot: u64) -> u64 {
        let tps = self.growth.tokens_per_slot;
        let of = |r: &RequestId| {
            self.cluster
                .request(*r)
                .map_or(0, |t| t.request.processed_tokens(slot, tps))
        };
        match item {
            ItemId::Request(r) => of(&r),
            ItemId::Group(gid) => self.cluster.group(gid).map_or(0, |g| g.members.iter().map(of).sum()),
        }
    }
}

/// Writes `<dir>/<stem>.csv` and `<dir>/<stem>.json`.
pub fn write_outputs(result: &SimResult, dir: &std::path::Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let csv = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
    result.metrics.write_csv(std::io::BufWriter::new(csv))?;
    std::fs::write(dir.join(format!("{stem}.json")), result.summary_json()? + "\n")?;
    Ok(())
}

/// One row of a scheduler comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scheduler: String,
    pub peak_gpus: usize,
    pub mean_utilization: f64,
    pub total_migrations: usize,
    pub migrations_per_second: f64,
    /// Peak-GPU reduction of the first row relative to this one, in percent.
    pub gpu_reduction_pct: f64,
    /// Utilization gain of the first row relative to this one, in percent.
    pub utilization_gain_pct: f64,
}

/// Runs every config on `trace`. Configs may differ only in their scheduler section.
pub fn compare(configs: &[Config], trace: &Trace) -> Result<(Vec<SimResult>, Vec<ComparisonRow>)> {
    if let Some(first) = configs.first() {
        for c in configs {
            let mut a = c.clone();
            a.scheduler = first.scheduler.clone();
            if a != *first {
                return Err(Error::Config("compared configs may differ only in the scheduler section".into()));
            }
        }
    }
    let results = configs.iter().map(|c| run(c, trace)).collect::<Result<Vec<_>>>()?;
    let rows = match results.first() {
        None => Vec::new(),
        Some(base) => results
            .iter()
            .zip(configs)
            .map(|(r, c)| {
                let s = &r.summary;
                let pct = |ours: f64, theirs: f64| if theirs == 0.0 { 0.0 } else { 100.0 * ours / theirs };
                ComparisonRow {
                    scheduler: c.scheduler.label(),
                    peak_gpus: s.peak_gpus,
                    mean_utilization: s.mean_utilization,
                    total_migrations: s.total_migrations,
                    migrations_per_second: s.migrations_per_second,
                    gpu_reduction_pct: pct(s.peak_gpus as f64 - base.summary.peak_gpus as f64, s.peak_gpus as f64),
                    utilization_gain_pct: pct(
                        base.summary.mean_utilization - s.mean_utilization,
                        s.mean_utilization,
                    ),
                }
            })
            .collect(),
    };
    Ok((results, rows))
}

pub fn write_comparison<W: Write>(rows: &[ComparisonRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SchedulerKind;
    use crate::workload::{gen_poisson, LengthDistribution, TraceRecord};

    fn small_config(kind: SchedulerKind) -> Config {
        let mut cfg = Config::default();
        cfg.cluster.capacity_bytes = 1200;
        cfg.cluster.kv_bytes_per_token = 1;
        cfg.scheduler.kind = kind;
        cfg.sim.duration_slots = 300;
        cfg.sim.tokens_per_slot = 4;
        cfg
    }

    fn small_trace(seed: u64) -> Trace {
        let dist = LengthDistribution {
            max_tokens: 500,
            ..LengthDistribution::default()
        };
        gen_poisson(0.5, 250, &dist, seed).unwrap()
    }

    #[test]
    fn empty_trace_gives_zero_metrics() {
        let r = run(&small_config(SchedulerKind::Mell), &Trace::default()).unwrap();
        assert_eq!(r.metrics.slots.len(), 300);
        assert!(r.metrics.slots.iter().all(|s| s.active_gpus == 0 && s.used_bytes == 0));
        assert_eq!(r.summary.peak_gpus, 0);
    }

    #[test]
    fn single_request_uses_one_gpu() {
        let t = Trace {
            records: vec![TraceRecord {
                request_id: 0,
                arrival_slot: 3,
                prompt_tokens: 100,
                response_tokens: 200,
            }],
            metadata: vec![],
        };
        for kind in SchedulerKind::ALL {
            let r = run(&small_config(kind), &t).unwrap();
            assert_eq!(r.summary.peak_gpus, 1, "{kind:?}");
            assert_eq!(r.summary.total_migrations, 0);
            assert_eq!(r.summary.completed, 1);
        }
    }

    #[test]
    fn oversized_request_is_aborted() {
        let t = Trace {
            records: vec![TraceRecord {
                request_id: 0,
                arrival_slot: 0,
                prompt_tokens: 1000,
                response_tokens: 400,
            }],
            metadata: vec![],
        };
        let r = run(&small_config(SchedulerKind::Mell), &t).unwrap();
        assert_eq!(r.summary.aborted, 1);
        assert!(matches!(r.events[0], SimEvent::Aborted { .. }));
    }

    #[test]
    fn deterministic_outputs() {
        let cfg = small_config(SchedulerKind::Mell);
        let t = small_trace(5);
        let a = run(&cfg, &t).unwrap();
        let b = run(&cfg, &t).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.metrics.write_csv(&mut ca).unwrap();
        b.metrics.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.summary_json().unwrap(), b.summary_json().unwrap());
    }

    #[test]
    fn conservation_and_capacity_for_every_scheduler() {
        for kind in SchedulerKind::ALL {
            let r = run(&small_config(kind), &small_trace(9)).unwrap();
            let s = &r.summary;
            assert_eq!(s.arrived, s.completed + s.aborted + s.running_at_end, "{kind:?}");
            assert_eq!(s.failed_operations, 0, "{kind:?}: {:?}", r.events);
            for m in &r.metrics.slots {
                assert!(m.used_bytes <= m.capacity_bytes, "{kind:?} slot {}", m.slot);
            }
            if matches!(kind, SchedulerKind::Bf | SchedulerKind::Wf) {
                assert_eq!(s.total_migrations, 0);
            }
        }
    }

    #[test]
    fn csv_header() {
        let r = run(&small_config(SchedulerKind::Bf), &Trace::default()).unwrap();
        let mut buf = Vec::new();
        r.metrics.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("slot,active_gpus,migrations,deferred,forced,used_bytes,capacity_bytes\n"));
    }

    #[test]
    fn compare_same_scheduler_has_zero_deltas() {
        let cfg = small_config(SchedulerKind::Bf);
        let (_, rows) = compare(&[cfg.clone(), cfg], &small_trace(1)).unwrap();
        assert!(rows.iter().all(|r| r.gpu_reduction_pct == 0.0 && r.utilization_gain_pct == 0.0));
    }

    #[test]
    fn compare_rejects_mismatched_configs() {
        let a = small_config(SchedulerKind::Bf);
        let mut b = small_config(SchedulerKind::Mell);
        b.sim.tokens_per_slot = 9;
        assert!(compare(&[a, b], &small_trace(1)).is_err());
    }
}
