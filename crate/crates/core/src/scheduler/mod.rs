//! Schedulers that map running requests onto GPUs.
//!
//! [`MellScheduler`] is the online L/M/S/T placement algorithm with migration; the
//! baselines in [`crate::baseline`] implement the same [`Scheduler`] trait.

mod engine;
mod mell;
mod priority;
mod properties;

use serde::{Deserialize, Serialize};

pub use mell::MellScheduler;
pub use priority::{allocation_priority, migration_priority, PriorityConfig};
pub use properties::{current_violations, exempt_set, is_open, verify_properties, Property, Violation};

use crate::model::{ClusterState, GpuId, ItemId, RequestId, SizeClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoveReason {
    Allocate,
    DepartRefill,
    Update,
    LFill,
    Batch,
    Rebalance,
}

/// One placement change. `src` is absent for the first placement of a new item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub item: ItemId,
    pub src: Option<GpuId>,
    pub dst: GpuId,
    pub reason: MoveReason,
}

impl Move {
    pub fn is_migration(&self) -> bool {
        self.src.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationKind {
    Allocate,
    Depart,
    Update,
    Batch,
    Rebalance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationLog {
    pub kind: OperationKind,
    pub request: Option<RequestId>,
    /// Class of the triggering request when the operation ran.
    pub class: Option<SizeClass>,
    pub moves: Vec<Move>,
}

impl OperationLog {
    pub fn new(kind: OperationKind, request: Option<RequestId>, class: Option<SizeClass>) -> Self {
        Self {
            kind,
            request,
            class,
            moves: Vec::new(),
        }
    }

    pub fn migrations(&self) -> usize {
        self.moves.iter().filter(|m| m.is_migration()).count()
    }

    /// Worst-case migrations a single unbatched operation of this kind may cause.
    pub fn migration_bound(&self) -> Option<usize> {
        use OperationKind::*;
        use SizeClass::*;
        match (self.kind, self.class?) {
            (Allocate | Depart, T | Tiny) => Some(2),
            (Allocate | Depart, S | M) => Some(5),
            (Allocate, L) => Some(5),
            (Depart, L) => Some(3),
            (Update, _) => Some(10),
            _ => None,
        }
    }

    pub fn within_bound(&self) -> bool {
        self.migration_bound().is_none_or(|b| self.migrations() <= b)
    }
}

/// Requests that need scheduling at one epoch boundary. All arrivals are already
/// admitted to the cluster and every footprint reflects the current slot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EpochEvents {
    pub arrivals: Vec<RequestId>,
    pub completions: Vec<RequestId>,
    pub updates: Vec<RequestId>,
}

impl EpochEvents {
    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty() && self.completions.is_empty() && self.updates.is_empty()
    }

    pub fn len(&self) -> usize {
        self.arrivals.len() + self.completions.len() + self.updates.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SchedEvent {
    OperationFailed { request: RequestId, message: String },
}

#[derive(Debug, Clone, Default)]
pub struct StepOutcome {
    pub logs: Vec<OperationLog>,
    pub terminated: Vec<GpuId>,
    pub events: Vec<SchedEvent>,
}

impl StepOutcome {
    pub fn moves(&self) -> impl Iterator<Item = &Move> {
        self.logs.iter().flat_map(|l| l.moves.iter())
    }

    pub fn migrations(&self) -> usize {
        self.logs.iter().map(OperationLog::migrations).sum()
    }
}

/// A placement policy driven once per epoch.
pub trait Scheduler {
    fn name(&self) -> &str;

    /// Applies departures, updates and arrivals, then terminates idle GPUs.
    fn step(&mut self, cluster: &mut ClusterState, events: &EpochEvents) -> StepOutcome;

    /// Whether the policy ever moves running requests.
    fn migrates(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(kind: OperationKind, class: SizeClass, n: usize) -> OperationLog {
        let mut l = OperationLog::new(kind, Some(RequestId(0)), Some(class));
        for i in 0..n {
            l.moves.push(Move {
                item: ItemId::Request(RequestId(i as u64)),
                src: Some(GpuId(0)),
                dst: GpuId(1),
                reason: MoveReason::Update,
            });
        }
        l
    }

    #[test]
    fn bounds_per_kind() {
        assert!(log(OperationKind::Depart, SizeClass::T, 2).within_bound());
        assert!(!log(OperationKind::Depart, SizeClass::T, 3).within_bound());
        assert!(!log(OperationKind::Depart, SizeClass::L, 4).within_bound());
        assert!(log(OperationKind::Allocate, SizeClass::L, 5).within_bound());
        assert!(log(OperationKind::Update, SizeClass::L, 10).within_bound());
        assert!(!log(OperationKind::Update, SizeClass::M, 11).within_bound());
        assert!(log(OperationKind::Batch, SizeClass::M, 50).within_bound());
    }

    #[test]
    fn fresh_placements_are_not_migrations() {
        let mut l = log(OperationKind::Allocate, SizeClass::M, 1);
        l.moves.push(Move {
            item: ItemId::Request(RequestId(9)),
            src: None,
            dst: GpuId(0),
            reason: MoveReason::Allocate,
        });
        assert_eq!(l.migrations(), 1);
    }
}
