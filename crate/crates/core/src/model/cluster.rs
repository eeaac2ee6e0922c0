use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::class::{classify_unchecked, SizeClass};
use super::request::{Request, RequestId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GpuId(pub u32);

impl fmt::Display for GpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gpu{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u64);

/// Something the scheduler places: a standalone request or a multi-item group of Tiny requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemId {
    Request(RequestId),
    Group(GroupId),
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ItemId::Request(r) => write!(f, "{r}"),
            ItemId::Group(g) => write!(f, "g{}", g.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GpuState {
    pub id: GpuId,
    pub capacity_bytes: u64,
    pub machine_id: u32,
    pub activation_seq: u64,
    pub residents: BTreeSet<ItemId>,
}

/// Tiny requests bundled so they can be scheduled as a single T-sized item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MultiItemGroup {
    pub id: GroupId,
    pub members: BTreeSet<RequestId>,
    pub aggregate_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrackedRequest {
    pub request: Request,
    /// Current KV footprint.
    pub size: u64,
    /// Class the scheduler last acted on; a mismatch with `size` means an update is due.
    pub class: SizeClass,
    pub group: Option<GroupId>,
}

/// Placement of every running request on the GPU pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterState {
    capacity: u64,
    gpus_per_machine: u32,
    gpus: BTreeMap<GpuId, GpuState>,
    requests: BTreeMap<RequestId, TrackedRequest>,
    groups: BTreeMap<GroupId, MultiItemGroup>,
    placement: BTreeMap<ItemId, GpuId>,
    next_activation_seq: u64,
    next_group_id: u64,
}

impl ClusterState {
    pub fn new(capacity: u64, gpus_per_machine: u32) -> Self {
        assert!(capacity > 0, "GPU capacity must be positive");
        Self {
            capacity,
            gpus_per_machine: gpus_per_machine.max(1),
            gpus: BTreeMap::new(),
            requests: BTreeMap::new(),
            groups: BTreeMap::new(),
            placement: BTreeMap::new(),
            next_activation_seq: 0,
            next_group_id: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn gpus_per_machine(&self) -> u32 {
        self.gpus_per_machine
    }

    pub fn gpus(&self) -> impl Iterator<Item = &GpuState> {
        self.gpus.values()
    }

    pub fn gpu(&self, id: GpuId) -> Option<&GpuState> {
        self.gpus.get(&id)
    }

    pub fn gpu_ids(&self) -> Vec<GpuId> {
        self.gpus.keys().copied().collect()
    }

    pub fn requests(&self) -> impl Iterator<Item = &TrackedRequest> {
        self.requests.values()
    }

    pub fn request(&self, id: RequestId) -> Option<&TrackedRequest> {
        self.requests.get(&id)
    }

    pub fn groups(&self) -> impl Iterator<Item = &MultiItemGroup> {
        self.groups.values()
    }

    pub fn group(&self, id: GroupId) -> Option<&MultiItemGroup> {
        self.groups.get(&id)
    }

    pub fn machine_of(&self, gpu: GpuId) -> u32 {
        gpu.0 / self.gpus_per_machine
    }

    /// Brings up a GPU, reusing the lowest free id. Activation sequence numbers are never reused.
    pub fn activate_gpu(&mut self) -> GpuId {
        let mut id = 0u32;
        while self.gpus.contains_key(&GpuId(id)) {
            id += 1;
        }
        let gpu = GpuState {
            id: GpuId(id),
            capacity_bytes: self.capacity,
            machine_id: id / self.gpus_per_machine,
            activation_seq: self.next_activation_seq,
            residents: BTreeSet::new(),
        };
        self.next_activation_seq += 1;
        self.gpus.insert(GpuId(id), gpu);
        GpuId(id)
    }

    /// Removes every GPU that hosts nothing.
    pub fn terminate_empty(&mut self) -> Vec<GpuId> {
        let idle: Vec<GpuId> = self
            .gpus
            .values()
            .filter(|g| g.residents.is_empty())
            .map(|g| g.id)
            .collect();
        for id in &idle {
            self.gpus.remove(id);
        }
        idle
    }

    /// Registers a running request with footprint `size`, unplaced.
    pub fn admit(&mut self, mut request: Request, size: u64) -> Result<()> {
        if size > self.capacity {
            return Err(Error::RequestTooLarge {
                id: request.id,
                size,
                capacity: self.capacity,
            });
        }
        if size == 0 {
            return Err(Error::Precondition(format!("{} has zero size", request.id)));
        }
        if self.requests.contains_key(&request.id) {
            return Err(Error::Precondition(format!("{} admitted twice", request.id)));
        }
        if request.state == super::RequestState::Pending {
            request.advance(super::RequestState::Running)?;
        }
        let class = classify_unchecked(size, self.capacity);
        self.requests.insert(
            request.id,
            TrackedRequest {
                request,
                size,
                class,
                group: None,
            },
        );
        Ok(())
    }

    /// Forgets a request. It must already be unplaced and outside any group.
    pub fn retire(&mut self, id: RequestId) -> Result<TrackedRequest> {
        let tracked = self.requests.get(&id).ok_or(Error::UnknownRequest(id))?;
        if tracked.group.is_some() || self.placement.contains_key(&ItemId::Request(id)) {
            return Err(Error::Precondition(format!("{id} is still placed")));
        }
        let mut tracked = self.requests.remove(&id).expect("checked above");
        tracked.request.state = super::RequestState::Completed;
        Ok(tracked)
    }

    /// Sets the current footprint of a request, keeping its group aggregate in sync.
    pub fn set_size(&mut self, id: RequestId, size: u64) -> Result<()> {
        let tracked = self.requests.get_mut(&id).ok_or(Error::UnknownRequest(id))?;
        let old = tracked.size;
        tracked.size = size;
        if let Some(g) = tracked.group {
            let group = self.groups.get_mut(&g).expect("group of member exists");
            group.aggregate_bytes = group.aggregate_bytes - old + size;
        }
        Ok(())
    }

    pub fn set_scheduled_class(&mut self, id: RequestId, class: SizeClass) {
        if let Some(t) = self.requests.get_mut(&id) {
            t.class = class;
        }
    }

    pub fn request_size(&self, id: RequestId) -> Option<u64> {
        self.requests.get(&id).map(|t| t.size)
    }

    pub fn classify(&self, size: u64) -> SizeClass {
        classify_unchecked(size.clamp(1, self.capacity), self.capacity)
    }

    /// Current class of a request from its live footprint.
    pub fn request_class(&self, id: RequestId) -> Option<SizeClass> {
        self.requests
            .get(&id)
            .map(|t| classify_unchecked(t.size.max(1), self.capacity))
    }

    pub fn item_size(&self, item: ItemId) -> u64 {
        match item {
            ItemId::Request(r) => self.requests.get(&r).map_or(0, |t| t.size),
            ItemId::Group(g) => self.groups.get(&g).map_or(0, |g| g.aggregate_bytes),
        }
    }

    /// Scheduling class of an item. Groups are T-items whatever their current aggregate.
    pub fn item_class(&self, item: ItemId) -> SizeClass {
        match item {
            ItemId::Request(_) => self.classify(self.item_size(item)),
            ItemId::Group(_) => SizeClass::T,
        }
    }

    pub fn item_gpu(&self, item: ItemId) -> Option<GpuId> {
        self.placement.get(&item).copied()
    }

    /// The schedulable item that carries a request: the request itself or its group.
    pub fn item_of(&self, id: RequestId) -> Option<ItemId> {
        let t = self.requests.get(&id)?;
        Some(match t.group {
            Some(g) => ItemId::Group(g),
            None => ItemId::Request(id),
        })
    }

    /// GPU hosting a request, directly or through its group.
    pub fn gpu_of_request(&self, id: RequestId) -> Option<GpuId> {
        self.item_of(id).and_then(|item| self.item_gpu(item))
    }

    pub fn place(&mut self, item: ItemId, gpu: GpuId) -> Result<()> {
        if self.placement.contains_key(&item) {
            return Err(Error::Precondition(format!("{item} already placed")));
        }
        let state = self
            .gpus
            .get_mut(&gpu)
            .ok_or_else(|| Error::Precondition(format!("{gpu} is not active")))?;
        state.residents.insert(item);
        self.placement.insert(item, gpu);
        Ok(())
    }

    pub fn unplace(&mut self, item: ItemId) -> Option<GpuId> {
        let gpu = self.placement.remove(&item)?;
        if let Some(state) = self.gpus.get_mut(&gpu) {
            state.residents.remove(&item);
        }
        Some(gpu)
    }

    pub fn new_group(&mut self) -> GroupId {
        let id = GroupId(self.next_group_id);
        self.next_group_id += 1;
        self.groups.insert(
            id,
            MultiItemGroup {
                id,
                members: BTreeSet::new(),
                aggregate_bytes: 0,
            },
        );
        id
    }

    pub fn join_group(&mut self, id: RequestId, group: GroupId) -> Result<()> {
        let size = self.request_size(id).ok_or(Error::UnknownRequest(id))?;
        if self.placement.contains_key(&ItemId::Request(id)) {
            return Err(Error::Precondition(format!("{id} is placed on its own")));
        }
        let g = self
            .groups
            .get_mut(&group)
            .ok_or_else(|| Error::Precondition(format!("no group {}", group.0)))?;
        g.members.insert(id);
        g.aggregate_bytes += size;
        self.requests.get_mut(&id).expect("known").group = Some(group);
        Ok(())
    }

    /// Takes a request out of its group. Empty groups are unplaced and dropped.
    pub fn leave_group(&mut self, id: RequestId) -> Option<GroupId> {
        let tracked = self.requests.get_mut(&id)?;
        let group = tracked.group.take()?;
        let size = tracked.size;
        let g = self.groups.get_mut(&group).expect("group exists");
        g.members.remove(&id);
        g.aggregate_bytes -= size;
        if g.members.is_empty() {
            self.unplace(ItemId::Group(group));
            self.groups.remove(&group);
        }
        Some(group)
    }

    /// Folds group `from` into `into`; both must sit on the same GPU (or both be unplaced).
    pub fn merge_groups(&mut self, into: GroupId, from: GroupId) -> Result<()> {
        if into == from {
            return Err(Error::Precondition("cannot merge a group into itself".into()));
        }
        if self.item_gpu(ItemId::Group(into)) != self.item_gpu(ItemId::Group(from)) {
            return Err(Error::Precondition(format!(
                "groups {} and {} are not co-located",
                into.0, from.0
            )));
        }
        let src = self
            .groups
            .remove(&from)
            .ok_or_else(|| Error::Precondition(format!("no group {}", from.0)))?;
        self.unplace(ItemId::Group(from));
        for m in &src.members {
            if let Some(t) = self.requests.get_mut(m) {
                t.group = Some(into);
            }
        }
        let dst = self.groups.get_mut(&into).expect("checked co-location");
        dst.members.extend(src.members);
        dst.aggregate_bytes += src.aggregate_bytes;
        Ok(())
    }

    pub fn used_bytes(&self, gpu: GpuId) -> u64 {
        self.gpus
            .get(&gpu)
            .map_or(0, |g| g.residents.iter().map(|&i| self.item_size(i)).sum())
    }

    pub fn free_bytes(&self, gpu: GpuId) -> i128 {
        self.capacity as i128 - self.used_bytes(gpu) as i128
    }

    pub fn fits(&self, gpu: GpuId, extra: u64) -> bool {
        self.free_bytes(gpu) >= extra as i128
    }

    pub fn overloaded(&self, gpu: GpuId) -> bool {
        self.free_bytes(gpu) < 0
    }

    /// `used / C >= 3/4`, evaluated exactly.
    pub fn at_least_three_quarters(&self, gpu: GpuId) -> bool {
        4 * self.used_bytes(gpu) as u128 >= 3 * self.capacity as u128
    }

    pub fn residents(&self, gpu: GpuId) -> Vec<ItemId> {
        self.gpus
            .get(&gpu)
            .map(|g| g.residents.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn residents_of_class(&self, gpu: GpuId, class: SizeClass) -> Vec<ItemId> {
        self.residents(gpu)
            .into_iter()
            .filter(|&i| self.item_class(i) == class)
            .collect()
    }

    /// Category of a GPU: the largest class among its items. Groups count at their
    /// aggregate size but never below T.
    pub fn gpu_category(&self, gpu: GpuId) -> Option<SizeClass> {
        let g = self.gpus.get(&gpu)?;
        g.residents
            .iter()
            .map(|&i| match i {
                ItemId::Request(_) => self.item_class(i),
                ItemId::Group(_) => self.classify(self.item_size(i)).max(SizeClass::T),
            })
            .max()
    }

    pub fn activation_seq(&self, gpu: GpuId) -> u64 {
        self.gpus.get(&gpu).map_or(0, |g| g.activation_seq)
    }

    pub fn active_gpu_count(&self) -> usize {
        self.gpus.values().filter(|g| !g.residents.is_empty()).count()
    }

    pub fn total_used_bytes(&self) -> u64 {
        self.gpus.keys().map(|&g| self.used_bytes(g)).sum()
    }

    /// Requests that are admitted but carried by no GPU.
    pub fn unplaced_requests(&self) -> Vec<RequestId> {
        self.requests
            .keys()
            .copied()
            .filter(|&r| self.gpu_of_request(r).is_none())
            .collect()
    }

    /// GPUs whose residents exceed capacity.
    pub fn capacity_violations(&self) -> Vec<(GpuId, u64)> {
        self.gpus
            .keys()
            .map(|&g| (g, self.used_bytes(g)))
            .filter(|&(_, used)| used > self.capacity)
            .collect()
    }

    /// Cross-checks placement, residents, group membership and running-request coverage.
    pub fn check_consistency(&self) -> Result<()> {
        for (item, gpu) in &self.placement {
            let ok = self.gpus.get(gpu).is_some_and(|g| g.residents.contains(item));
            if !ok {
                return Err(Error::Precondition(format!("{item} placement not mirrored on {gpu}")));
            }
        }
        for g in self.gpus.values() {
            for item in &g.residents {
                if self.placement.get(item) != Some(&g.id) {
                    return Err(Error::Precondition(format!("{} lists stray {item}", g.id)));
                }
            }
        }
        for grp in self.groups.values() {
            let sum: u64 = grp.members.iter().map(|m| self.requests[m].size).sum();
            if sum != grp.aggregate_bytes || grp.members.is_empty() {
                return Err(Error::Precondition(format!("group {} aggregate drift", grp.id.0)));
            }
        }
        for (id, t) in &self.requests {
            let direct = self.placement.contains_key(&ItemId::Request(*id));
            match (t.group, direct) {
                (Some(_), true) => {
                    return Err(Error::Precondition(format!("{id} placed twice")));
                }
                (Some(g), false) if !self.groups[&g].members.contains(id) => {
                    return Err(Error::Precondition(format!("{id} not in its group")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64) -> Request {
        Request::new(id, 0, 1, 1, 1).unwrap()
    }

    #[test]
    fn activation_reuses_ids_but_not_sequence_numbers() {
        let mut c = ClusterState::new(24, 4);
        let a = c.activate_gpu();
        let b = c.activate_gpu();
        assert_eq!((a, b), (GpuId(0), GpuId(1)));
        c.terminate_empty();
        let d = c.activate_gpu();
        assert_eq!(d, GpuId(0));
        assert_eq!(c.activation_seq(d), 2);
    }

    #[test]
    fn category_follows_largest_item() {
        let mut c = ClusterState::new(24, 4);
        let g = c.activate_gpu();
        c.admit(req(1), 13).unwrap();
        c.admit(req(2), 7).unwrap();
        c.place(ItemId::Request(RequestId(2)), g).unwrap();
        assert_eq!(c.gpu_category(g), Some(SizeClass::S));
        c.place(ItemId::Request(RequestId(1)), g).unwrap();
        assert_eq!(c.gpu_category(g), Some(SizeClass::L));
        assert_eq!(c.used_bytes(g), 20);
        c.check_consistency().unwrap();
    }

    #[test]
    fn group_aggregate_tracks_member_growth() {
        let mut c = ClusterState::new(48, 4);
        c.admit(req(1), 3).unwrap();
        c.admit(req(2), 3).unwrap();
        let grp = c.new_group();
        c.join_group(RequestId(1), grp).unwrap();
        c.join_group(RequestId(2), grp).unwrap();
        c.set_size(RequestId(2), 5).unwrap();
        assert_eq!(c.group(grp).unwrap().aggregate_bytes, 8);
        let g = c.activate_gpu();
        c.place(ItemId::Group(grp), g).unwrap();
        assert_eq!(c.gpu_of_request(RequestId(1)), Some(g));
        c.leave_group(RequestId(1));
        c.leave_group(RequestId(2));
        assert!(c.group(grp).is_none());
        assert_eq!(c.active_gpu_count(), 0);
        c.check_consistency().unwrap();
    }

    #[test]
    fn oversized_admission_is_rejected() {
        let mut c = ClusterState::new(24, 4);
        assert!(matches!(c.admit(req(1), 25), Err(Error::RequestTooLarge { .. })));
    }
}
