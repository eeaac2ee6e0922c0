//! Structural invariants the Mell scheduler keeps between operations.
//!
//! Each invariant tolerates one "open" GPU per category: the most recently activated
//! GPU still being filled. [`exempt_set`] computes those GPUs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{ClusterState, GpuId, GpuState, ItemId, SizeClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    /// An M-GPU holds exactly two M-requests and at most one T-item.
    MediumPair,
    /// An S-GPU holds exactly three S-requests.
    SmallTriple,
    /// A T-GPU is at least 3/4 full.
    TinyUtilization,
    /// An L-GPU without an M/S companion has no M/S-request anywhere that would fit.
    LoneLargeFit,
    /// While any T-GPU exists, L- and M-GPUs are at least 3/4 full.
    FullWhileTinyExists,
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Property::MediumPair => "medium-pair",
            Property::SmallTriple => "small-triple",
            Property::TinyUtilization => "tiny-utilization",
            Property::LoneLargeFit => "lone-large-fit",
            Property::FullWhileTinyExists => "full-while-tiny-exists",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub gpu: GpuId,
    pub property: Property,
    pub detail: String,
}

pub(crate) fn largest_l(cluster: &ClusterState, gpu: GpuId) -> Option<u64> {
    cluster
        .residents(gpu)
        .into_iter()
        .filter(|&i| cluster.item_class(i) == SizeClass::L)
        .map(|i| cluster.item_size(i))
        .max()
}

pub(crate) fn has_ms(cluster: &ClusterState, gpu: GpuId) -> bool {
    crate::model::has_medium_or_small(cluster, gpu)
}

/// Per-GPU facts every check needs, gathered in one pass over the residents.
struct Profile {
    gpu: GpuId,
    seq: u64,
    cat: SizeClass,
    used: u64,
    m: usize,
    s: usize,
    t: usize,
    largest_l: u64,
    smallest_ms: Option<u64>,
}

impl Profile {
    fn of(cluster: &ClusterState, g: &GpuState) -> Option<Self> {
        let mut p = Profile {
            gpu: g.id,
            seq: g.activation_seq,
            cat: SizeClass::Tiny,
            used: 0,
            m: 0,
            s: 0,
            t: 0,
            largest_l: 0,
            smallest_ms: None,
        };
        for &i in &g.residents {
            let size = cluster.item_size(i);
            p.used += size;
            let class = match i {
                ItemId::Request(_) => cluster.classify(size),
                ItemId::Group(_) => {
                    p.cat = p.cat.max(cluster.classify(size).max(SizeClass::T));
                    p.t += 1;
                    continue;
                }
            };
            p.cat = p.cat.max(class);
            match class {
                SizeClass::L => p.largest_l = p.largest_l.max(size),
                SizeClass::M | SizeClass::S => {
                    if class == SizeClass::M {
                        p.m += 1;
                    } else {
                        p.s += 1;
                    }
                    p.smallest_ms = Some(p.smallest_ms.map_or(size, |x| x.min(size)));
                }
                SizeClass::T | SizeClass::Tiny => p.t += 1,
            }
        }
        if g.residents.is_empty() {
            return None;
        }
        p.cat = p.cat.max(SizeClass::T);
        Some(p)
    }

    fn three_quarters(&self, capacity: u64) -> bool {
        4 * self.used as u128 >= 3 * capacity as u128
    }

    fn is_open(&self, capacity: u64) -> bool {
        match self.cat {
            SizeClass::L => self.m + self.s == 0,
            SizeClass::M => self.m < 2,
            SizeClass::S => self.s < 3,
            SizeClass::T | SizeClass::Tiny => !self.three_quarters(capacity),
        }
    }
}

fn profiles(cluster: &ClusterState) -> Vec<Profile> {
    cluster.gpus().filter_map(|g| Profile::of(cluster, g)).collect()
}

/// Whether `gpu` is still accepting items of its own category.
pub fn is_open(cluster: &ClusterState, gpu: GpuId) -> bool {
    cluster
        .gpu(gpu)
        .and_then(|g| Profile::of(cluster, g))
        .is_some_and(|p| p.is_open(cluster.capacity()))
}

fn exempt_of(profiles: &[Profile], capacity: u64) -> BTreeSet<GpuId> {
    let mut latest: BTreeMap<SizeClass, (u64, GpuId)> = BTreeMap::new();
    for p in profiles {
        if latest.get(&p.cat).is_some_and(|&(seq, _)| seq >= p.seq) || !p.is_open(capacity) {
            continue;
        }
        latest.insert(p.cat, (p.seq, p.gpu));
    }
    latest.into_values().map(|(_, g)| g).collect()
}

/// For each category, the open GPU with the latest activation.
pub fn exempt_set(cluster: &ClusterState) -> BTreeSet<GpuId> {
    exempt_of(&profiles(cluster), cluster.capacity())
}

fn verify_with(profiles: &[Profile], capacity: u64, exempt: &BTreeSet<GpuId>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |gpu, property, detail: String| out.push(Violation { gpu, property, detail });

    let tiny_exists = profiles.iter().any(|p| p.cat == SizeClass::T);
    let smallest_ms = profiles
        .iter()
        .filter(|p| p.cat.is_medium_or_small())
        .filter_map(|p| p.smallest_ms)
        .min();

    for p in profiles {
        if exempt.contains(&p.gpu) {
            continue;
        }
        let gpu = p.gpu;
        match p.cat {
            SizeClass::M => {
                if p.m != 2 || p.s != 0 || p.t > 1 {
                    push(gpu, Property::MediumPair, format!("{} M, {} S, {} T", p.m, p.s, p.t));
                }
            }
            SizeClass::S => {
                if p.s != 3 {
                    push(gpu, Property::SmallTriple, format!("{} S", p.s));
                }
            }
            SizeClass::T | SizeClass::Tiny => {
                if !p.three_quarters(capacity) {
                    push(gpu, Property::TinyUtilization, format!("used {}", p.used));
                }
            }
            SizeClass::L => {
                if p.m + p.s == 0 {
                    if let Some(s) = smallest_ms {
                        if (p.largest_l as u128) + (s as u128) < capacity as u128 {
                            push(gpu, Property::LoneLargeFit, format!("L {} + {s} fits", p.largest_l));
                        }
                    }
                }
            }
        }
        if tiny_exists && matches!(p.cat, SizeClass::L | SizeClass::M) && !p.three_quarters(capacity) {
            push(gpu, Property::FullWhileTinyExists, format!("used {}", p.used));
        }
    }
    out
}

/// Checks every invariant on every GPU outside `exempt`.
pub fn verify_properties(cluster: &ClusterState, exempt: &BTreeSet<GpuId>) -> Vec<Violation> {
    verify_with(&profiles(cluster), cluster.capacity(), exempt)
}

/// Violations outside the current exempt set, computed in a single pass.
pub fn current_violations(cluster: &ClusterState) -> Vec<Violation> {
    let ps = profiles(cluster);
    let exempt = exempt_of(&ps, cluster.capacity());
    verify_with(&ps, cluster.capacity(), &exempt)
}
