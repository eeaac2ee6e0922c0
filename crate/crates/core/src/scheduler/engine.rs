//! Mutation engine behind [`super::MellScheduler`]: placement rules, repairs and
//! move bookkeeping for a single operation.

use std::collections::{BTreeMap, BTreeSet};

use super::priority::{allocation_priority, best_first, migration_priority, PriorityConfig};
use super::properties::{current_violations, has_ms, is_open, largest_l, Property};
use super::{Move, MoveReason};
use crate::error::{Error, Result};
use crate::model::{ClusterState, GpuId, GroupId, ItemId, RequestId, SizeClass};

/// Cascades are short by construction; this only guards against cycles.
const MAX_DEPTH: usize = 64;

pub(super) struct Engine<'a> {
    pub c: &'a mut ClusterState,
    prio: &'a PriorityConfig,
    moves: Vec<Move>,
    /// Where each currently detached item was before the operation touched it.
    origin: BTreeMap<ItemId, GpuId>,
    pub reason: MoveReason,
    /// When set, repairs are collected here instead of running immediately.
    deferred: Option<BTreeSet<GpuId>>,
    depth: usize,
    /// Alternative choices explored by the caller; see [`Variant`].
    variant: u32,
}

/// Bits of an engine variant. Each bit flips one choice point between two
/// rule-conforming alternatives; the scheduler keeps the cheapest outcome.
pub(super) struct Variant;

impl Variant {
    /// After an L departs, leave its M/S partner in place instead of moving it beside a lone L.
    pub const KEEP_PARTNER: u32 = 1;
    /// Merge under-full T-GPUs by pushing rather than pulling when both work.
    pub const PUSH_T: u32 = 2;
    /// After an L departs, bring a lone L over to its M/S partner instead.
    pub const FETCH_LONE_L: u32 = 4;
    /// Re-placed T-items go to the fullest T-GPU with room instead of filling L-GPUs first.
    pub const T_TO_T_GPU: u32 = 8;
    /// Pair open M/S-GPUs into the newer one instead of the older one.
    pub const MERGE_INTO_NEWER: u32 = 16;
    /// Fold co-located tiny groups together before the operation.
    pub const CONSOLIDATE: u32 = 32;
    pub const COUNT: u32 = 64;
}

impl<'a> Engine<'a> {
    pub fn new(c: &'a mut ClusterState, prio: &'a PriorityConfig, reason: MoveReason) -> Self {
        Self {
            c,
            prio,
            moves: Vec::new(),
            origin: BTreeMap::new(),
            reason,
            deferred: None,
            depth: 0,
            variant: 0,
        }
    }

    pub fn with_variant(mut self, variant: u32) -> Self {
        self.variant = variant;
        self
    }

    fn has(&self, bit: u32) -> bool {
        self.variant & bit != 0
    }

    pub fn defer_repairs(&mut self) {
        self.deferred = Some(BTreeSet::new());
    }

    /// Net moves of the operation: one per item, from its first source to its final GPU.
    pub fn finish(self) -> Vec<Move> {
        let mut order: Vec<ItemId> = Vec::new();
        let mut net: BTreeMap<ItemId, Move> = BTreeMap::new();
        for m in self.moves {
            match net.get_mut(&m.item) {
                Some(prev) => prev.dst = m.dst,
                None => {
                    order.push(m.item);
                    net.insert(m.item, m);
                }
            }
        }
        order
            .into_iter()
            .filter_map(|i| net.remove(&i))
            .filter(|m| m.src != Some(m.dst))
            .collect()
    }

    /// Puts every still-detached item back where it came from.
    pub fn rollback(&mut self) {
        for (item, gpu) in std::mem::take(&mut self.origin) {
            if self.c.item_gpu(item).is_none() && self.c.gpu(gpu).is_some() {
                let _ = self.c.place(item, gpu);
            }
        }
    }

    // ---- queries ----------------------------------------------------------

    fn cat(&self, g: GpuId) -> Option<SizeClass> {
        self.c.gpu_category(g).map(|c| c.max(SizeClass::T))
    }

    fn by_size_desc(&self, mut items: Vec<ItemId>) -> Vec<ItemId> {
        items.sort_by_key(|&i| (std::cmp::Reverse(self.c.item_size(i)), i));
        items
    }

    fn t_items(&self, g: GpuId) -> Vec<ItemId> {
        let v = self
            .c
            .residents(g)
            .into_iter()
            .filter(|&i| self.c.item_class(i).is_tiny_or_t())
            .collect();
        self.by_size_desc(v)
    }

    fn ms_requests(&self, g: GpuId) -> Vec<ItemId> {
        let v = self
            .c
            .residents(g)
            .into_iter()
            .filter(|&i| matches!(i, ItemId::Request(_)) && self.c.item_class(i).is_medium_or_small())
            .collect();
        self.by_size_desc(v)
    }

    fn count(&self, g: GpuId, class: SizeClass) -> usize {
        self.c
            .residents(g)
            .into_iter()
            .filter(|&i| matches!(i, ItemId::Request(_)) && self.c.item_class(i) == class)
            .count()
    }

    fn gpus_of(&self, cat: SizeClass, exclude: &[GpuId]) -> Vec<GpuId> {
        self.c
            .gpu_ids()
            .into_iter()
            .filter(|g| !exclude.contains(g) && self.cat(*g) == Some(cat))
            .collect()
    }

    /// The latest-activated open GPU of a category.
    fn open_gpu(&self, cat: SizeClass, exclude: &[GpuId]) -> Option<GpuId> {
        self.gpus_of(cat, exclude)
            .into_iter()
            .filter(|&g| is_open(self.c, g))
            .max_by_key(|&g| self.c.activation_seq(g))
    }

    /// Where T-items are harvested from: the open T-GPU, else the latest T-GPU.
    fn t_source(&self, exclude: &[GpuId]) -> Option<GpuId> {
        self.open_gpu(SizeClass::T, exclude).or_else(|| {
            self.gpus_of(SizeClass::T, exclude)
                .into_iter()
                .max_by_key(|&g| self.c.activation_seq(g))
        })
    }

    fn best_by_alloc(&self, cands: impl IntoIterator<Item = GpuId>) -> Option<GpuId> {
        cands
            .into_iter()
            .map(|g| (allocation_priority(self.c, g, self.prio), g))
            .min_by(|a, b| best_first(*a, *b))
            .map(|x| x.1)
    }

    /// Bytes `g` still needs to reach 3/4 of capacity.
    fn shortfall(&self, g: GpuId) -> u64 {
        let target = (3 * self.c.capacity() as u128).div_ceil(4) as u64;
        target.saturating_sub(self.c.used_bytes(g))
    }

    /// T-items to evict from `g`, largest first, so that `size` more bytes fit.
    fn evictions_for(&self, g: GpuId, size: u64, keep: Option<ItemId>) -> Option<Vec<ItemId>> {
        let mut free = self.c.free_bytes(g);
        let mut out = Vec::new();
        let mut ts = self.t_items(g).into_iter().filter(|&i| Some(i) != keep);
        while free < size as i128 {
            let t = ts.next()?;
            free += self.c.item_size(t) as i128;
            out.push(t);
        }
        Some(out)
    }

    /// Migrations that moving `items` would add: items already moved by this
    /// operation are free, since only their final placement counts.
    fn cost(&self, items: &[ItemId]) -> usize {
        items
            .iter()
            .filter(|&&i| !self.moves.iter().any(|m| m.item == i))
            .count()
    }

    // ---- primitive moves --------------------------------------------------

    fn detach(&mut self, item: ItemId) -> Option<GpuId> {
        let g = self.c.unplace(item)?;
        self.origin.entry(item).or_insert(g);
        Some(g)
    }

    fn attach(&mut self, item: ItemId, dst: GpuId) -> Result<()> {
        self.c.place(item, dst)?;
        let src = self.origin.remove(&item);
        self.moves.push(Move {
            item,
            src,
            dst,
            reason: self.reason,
        });
        Ok(())
    }

    fn relocate(&mut self, item: ItemId, dst: GpuId) -> Result<()> {
        self.detach(item);
        self.attach(item, dst)
    }

    /// Marks a detached request as coming from `gpu` (used when it leaves a group).
    pub fn note_origin(&mut self, item: ItemId, gpu: GpuId) {
        self.origin.entry(item).or_insert(gpu);
    }

    fn fresh_gpu(&mut self, exclude: &[GpuId]) -> GpuId {
        let idle = self
            .c
            .gpus()
            .find(|g| g.residents.is_empty() && !exclude.contains(&g.id))
            .map(|g| g.id);
        idle.unwrap_or_else(|| self.c.activate_gpu())
    }

    fn reallocate_all(&mut self, items: Vec<ItemId>, exclude: &[GpuId]) -> Result<()> {
        for item in self.by_size_desc(items) {
            self.allocate_item(item, exclude)?;
        }
        Ok(())
    }

    // ---- allocation -------------------------------------------------------

    pub fn allocate_item(&mut self, item: ItemId, exclude: &[GpuId]) -> Result<GpuId> {
        match self.c.item_class(item) {
            SizeClass::L => self.alloc_l(item, exclude),
            SizeClass::M | SizeClass::S => self.alloc_sm(item, exclude),
            SizeClass::T | SizeClass::Tiny => self.alloc_t(item, exclude),
        }
    }

    fn alloc_t(&mut self, item: ItemId, exclude: &[GpuId]) -> Result<GpuId> {
        let size = self.c.item_size(item);
        let skip_l = self.has(Variant::T_TO_T_GPU) && self.origin.contains_key(&item);
        let l_gpus: Vec<GpuId> = self
            .gpus_of(SizeClass::L, exclude)
            .into_iter()
            .filter(|&g| self.c.fits(g, size))
            .collect();
        let dst = self.best_by_alloc(l_gpus).filter(|_| !skip_l).or_else(|| {
            if skip_l {
                return None;
            }
            let pairs: Vec<GpuId> = self
                .gpus_of(SizeClass::M, exclude)
                .into_iter()
                .filter(|&g| {
                    self.count(g, SizeClass::M) == 2
                        && self.t_items(g).is_empty()
                        && !self.c.at_least_three_quarters(g)
                        && self.c.fits(g, size)
                })
                .collect();
            self.best_by_alloc(pairs)
        });
        let best_fit_t = || {
            self.gpus_of(SizeClass::T, exclude)
                .into_iter()
                .filter(|&g| self.c.fits(g, size))
                .max_by_key(|&g| (self.c.used_bytes(g), std::cmp::Reverse(g)))
        };
        let dst = dst
            .or_else(|| if skip_l { best_fit_t() } else { None })
            .or_else(|| self.open_gpu(SizeClass::T, exclude).filter(|&g| self.c.fits(g, size)))
            .or_else(|| {
                self.gpus_of(SizeClass::T, exclude)
                    .into_iter()
                    .filter(|&g| self.c.fits(g, size))
                    .max_by_key(|&g| self.c.activation_seq(g))
            });
        let dst = match dst {
            Some(g) => g,
            None => self.fresh_gpu(exclude),
        };
        self.attach(item, dst)?;
        Ok(dst)
    }

    /// Lone-L GPUs that can take `size` beside their L (strictly below capacity),
    /// ranked by T-evictions needed, then allocation priority.
    fn lone_l_target(&self, size: u64, exclude: &[GpuId]) -> Option<(GpuId, Vec<ItemId>)> {
        let cap = self.c.capacity() as u128;
        self.gpus_of(SizeClass::L, exclude)
            .into_iter()
            .filter(|&g| !has_ms(self.c, g))
            .filter(|&g| (largest_l(self.c, g).unwrap_or(0) as u128) + (size as u128) < cap)
            .filter_map(|g| self.evictions_for(g, size, None).map(|ev| (g, ev)))
            .min_by(|a, b| {
                a.1.len().cmp(&b.1.len()).then_with(|| {
                    best_first(
                        (allocation_priority(self.c, a.0, self.prio), a.0),
                        (allocation_priority(self.c, b.0, self.prio), b.0),
                    )
                })
            })
    }

    /// Places `item` on `dst` after evicting `evict`; evicted T-items are reallocated elsewhere.
    fn place_evicting(&mut self, item: ItemId, dst: GpuId, evict: Vec<ItemId>) -> Result<()> {
        for &e in &evict {
            self.detach(e);
        }
        self.attach(item, dst)?;
        self.reallocate_all(evict, &[dst])
    }

    /// Moves an M/S item next to a lone L if one can take it.
    fn try_beside_lone_l(&mut self, item: ItemId, exclude: &[GpuId]) -> Result<Option<GpuId>> {
        let size = self.c.item_size(item);
        match self.lone_l_target(size, exclude) {
            Some((g, ev)) => {
                self.detach(item);
                self.place_evicting(item, g, ev)?;
                Ok(Some(g))
            }
            None => Ok(None),
        }
    }

    /// Moves the L of a lone-L GPU onto `gpu`, next to its M/S request `partner`.
    fn fetch_lone_l(&mut self, partner: ItemId, gpu: GpuId) -> Result<()> {
        let cap = self.c.capacity() as u128;
        let size = self.c.item_size(partner) as u128;
        let cand = self
            .gpus_of(SizeClass::L, &[gpu])
            .into_iter()
            .filter(|&g| !has_ms(self.c, g))
            .filter_map(|g| {
                let l = self
                    .c
                    .residents(g)
                    .into_iter()
                    .find(|&i| self.c.item_class(i) == SizeClass::L)?;
                let ls = self.c.item_size(l);
                (ls as u128 + size < cap)
                    .then(|| self.evictions_for(gpu, ls, None).map(|ev| (g, l, ev)))
                    .flatten()
            })
            .min_by_key(|(g, _, ev)| (ev.len(), *g));
        if let Some((src, l, ev)) = cand {
            self.detach(l);
            self.place_evicting(l, gpu, ev)?;
            self.repair(src)?;
        }
        Ok(())
    }

    fn alloc_sm(&mut self, item: ItemId, exclude: &[GpuId]) -> Result<GpuId> {
        if let Some(g) = self.try_beside_lone_l(item, exclude)? {
            return Ok(g);
        }
        let class = self.c.item_class(item);
        let size = self.c.item_size(item);
        if let Some(g) = self.open_gpu(class, exclude) {
            if let Some(ev) = self.evictions_for(g, size, None) {
                self.place_evicting(item, g, ev)?;
                self.top_up_medium(g)?;
                return Ok(g);
            }
        }
        let g = self.fresh_gpu(exclude);
        self.attach(item, g)?;
        Ok(g)
    }

    fn alloc_l(&mut self, item: ItemId, exclude: &[GpuId]) -> Result<GpuId> {
        let g = self.fresh_gpu(exclude);
        self.attach(item, g)?;
        self.fix_l(g)?;
        Ok(g)
    }

    /// Gives a lone L an M/S companion if any fits, otherwise tops it up with T-items.
    fn fix_l(&mut self, g: GpuId) -> Result<()> {
        if self.cat(g) != Some(SizeClass::L) || has_ms(self.c, g) {
            return Ok(());
        }
        let l = largest_l(self.c, g).unwrap_or(0) as u128;
        let cap = self.c.capacity() as u128;
        let mut best: Option<(f64, GpuId, ItemId)> = None;
        for k in self.c.gpu_ids() {
            if k == g || !self.cat(k).is_some_and(SizeClass::is_medium_or_small) {
                continue;
            }
            let Some(r) = self
                .ms_requests(k)
                .into_iter()
                .find(|&r| l + (self.c.item_size(r) as u128) < cap)
            else {
                continue;
            };
            let score = migration_priority(self.c, g, k, self.prio);
            if best.is_none_or(|(s, bk, _)| best_first((score, k), (s, bk)).is_lt()) {
                best = Some((score, k, r));
            }
        }
        if let Some((_, donor, r)) = best {
            let size = self.c.item_size(r);
            let ev = self.evictions_for(g, size, None).unwrap_or_default();
            let prev = std::mem::replace(&mut self.reason, MoveReason::LFill);
            self.detach(r);
            let res = self.place_evicting(r, g, ev);
            self.reason = prev;
            res?;
            return self.repair(donor);
        }
        self.pull_t_into(g, 2)
    }

    /// Harvests up to `max` T-items from T-GPUs while `g` is below 3/4 full.
    fn pull_t_into(&mut self, g: GpuId, max: usize) -> Result<()> {
        for _ in 0..max {
            if self.c.at_least_three_quarters(g) {
                break;
            }
            let Some(src) = self.t_source(&[g]) else { break };
            let Some(item) = self.pick_pull(src, g) else { break };
            let prev = std::mem::replace(&mut self.reason, MoveReason::LFill);
            let res = self.relocate(item, g);
            self.reason = prev;
            res?;
        }
        Ok(())
    }

    /// Item on `src` to move into `dst`: the smallest that closes its shortfall,
    /// otherwise the largest that fits.
    fn pick_pull(&self, src: GpuId, dst: GpuId) -> Option<ItemId> {
        let need = self.shortfall(dst);
        let fitting: Vec<ItemId> = self
            .t_items(src)
            .into_iter()
            .filter(|&i| self.c.fits(dst, self.c.item_size(i)))
            .collect();
        fitting
            .iter()
            .rev()
            .find(|&&i| self.c.item_size(i) >= need)
            .or(fitting.first())
            .copied()
    }

    /// Brings a full M-pair to 3/4 while T-GPUs exist: it takes one T-item, or swaps
    /// its single T-item for a larger one.
    fn top_up_medium(&mut self, g: GpuId) -> Result<()> {
        if self.cat(g) != Some(SizeClass::M)
            || self.count(g, SizeClass::M) != 2
            || self.c.at_least_three_quarters(g)
        {
            return Ok(());
        }
        let ts = self.t_items(g);
        match ts.as_slice() {
            [] => self.pull_t_into(g, 1),
            &[t] => {
                let base = self.c.used_bytes(g) - self.c.item_size(t);
                let target = (3 * self.c.capacity() as u128).div_ceil(4) as u64;
                let open = self.open_gpu(SizeClass::T, &[g]);
                let mut sources = self.gpus_of(SizeClass::T, &[g]);
                sources.sort_by_key(|&k| (Some(k) != open, std::cmp::Reverse(self.c.activation_seq(k))));
                let swap = sources.into_iter().find_map(|src| {
                    let src_used = self.c.used_bytes(src);
                    self.t_items(src).into_iter().rev().find(|&x| {
                        let xs = self.c.item_size(x);
                        let after = base + xs;
                        let src_after = src_used - xs + self.c.item_size(t);
                        after >= target
                            && after <= self.c.capacity()
                            && src_after <= self.c.capacity()
                            && (open.is_none()
                                || Some(src) == open
                                || 4 * src_after as u128 >= 3 * self.c.capacity() as u128)
                    }).map(|x| (src, x))
                });
                if let Some((src, x)) = swap {
                    self.detach(x);
                    self.detach(t);
                    self.attach(x, g)?;
                    self.attach(t, src)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    // ---- repair -----------------------------------------------------------

    pub fn repair(&mut self, g: GpuId) -> Result<()> {
        match &mut self.deferred {
            Some(set) => {
                set.insert(g);
                Ok(())
            }
            None => self.repair_now(g),
        }
    }

    fn repair_now(&mut self, g: GpuId) -> Result<()> {
        self.depth += 1;
        let res = self.repair_inner(g);
        self.depth -= 1;
        res
    }

    fn repair_inner(&mut self, g: GpuId) -> Result<()> {
        if self.depth > MAX_DEPTH {
            return Err(Error::Precondition(format!("repair cascade too deep at {g} ({:?})", self.cat(g))));
        }
        match self.cat(g) {
            None => Ok(()),
            Some(SizeClass::L) => self.fix_l(g),
            Some(SizeClass::M) => self.repair_m(g),
            Some(SizeClass::S) => self.repair_s(g),
            Some(_) => {
                self.repair_t(g)?;
                self.feed_underfull(g)
            }
        }
    }

    /// Moves T-items from T-GPU `g` onto L-GPUs and M-pairs still below 3/4.
    fn feed_underfull(&mut self, g: GpuId) -> Result<()> {
        for _ in 0..2 {
            if self.cat(g) != Some(SizeClass::T) {
                break;
            }
            let needy: Vec<GpuId> = self
                .c
                .gpu_ids()
                .into_iter()
                .filter(|&h| h != g && !self.c.at_least_three_quarters(h))
                .filter(|&h| match self.cat(h) {
                    Some(SizeClass::L) => true,
                    Some(SizeClass::M) => {
                        self.count(h, SizeClass::M) == 2 && self.t_items(h).is_empty()
                    }
                    _ => false,
                })
                .collect();
            let Some(h) = self.best_by_alloc(needy) else { break };
            let Some(item) = self.pick_pull(g, h) else { break };
            self.relocate(item, h)?;
        }
        Ok(())
    }

    /// Pairs two open GPUs of `class`: the older one receives, the newer one donates.
    /// Returns `(receiver, donor)` if anything moved.
    fn merge_open(
        &mut self,
        g: GpuId,
        class: SizeClass,
        full: usize,
    ) -> Result<Option<(GpuId, GpuId)>> {
        let Some(k) = self.open_gpu(class, &[g]) else {
            return Ok(None);
        };
        let older = self.c.activation_seq(g) < self.c.activation_seq(k);
        let (recv, donor) = if older != self.has(Variant::MERGE_INTO_NEWER) {
            (g, k)
        } else {
            (k, g)
        };
        let mut moved = false;
        while self.count(recv, class) < full {
            let cands: Vec<ItemId> = self
                .ms_requests(donor)
                .into_iter()
                .filter(|&i| self.c.item_class(i) == class)
                .collect();
            let pick = cands
                .iter()
                .copied()
                .find(|&i| self.c.fits(recv, self.c.item_size(i)))
                .or(cands.last().copied());
            let Some(r) = pick else { break };
            let Some(ev) = self.evictions_for(recv, self.c.item_size(r), None) else {
                break;
            };
            self.detach(r);
            self.place_evicting(r, recv, ev)?;
            moved = true;
        }
        Ok(moved.then_some((recv, donor)))
    }

    fn repair_m(&mut self, g: GpuId) -> Result<()> {
        if self.count(g, SizeClass::M) < 2 {
            if let Some((recv, donor)) = self.merge_open(g, SizeClass::M, 2)? {
                self.top_up_medium(recv)?;
                return self.repair(donor);
            }
        }
        self.top_up_medium(g)
    }

    fn repair_s(&mut self, g: GpuId) -> Result<()> {
        if self.count(g, SizeClass::S) < 3 {
            if let Some((_, donor)) = self.merge_open(g, SizeClass::S, 3)? {
                return self.repair(donor);
            }
        }
        Ok(())
    }

    /// An under-full T-GPU merges with the other open T-GPU, pulling items in or
    /// pushing its own out, whichever takes fewer moves.
    fn repair_t(&mut self, g: GpuId) -> Result<()> {
        if self.c.at_least_three_quarters(g) {
            return Ok(());
        }
        let Some(k) = self.open_gpu(SizeClass::T, &[g]) else {
            return Ok(());
        };
        // Simulate greedy pulls from k into g.
        let mut pulls = Vec::new();
        let mut used = self.c.used_bytes(g);
        let target = (3 * self.c.capacity() as u128).div_ceil(4) as u64;
        let mut pool = self.t_items(k);
        while pulls.len() < 2 && used < target {
            let need = target - used;
            let free = self.c.capacity().saturating_sub(used);
            let fitting: Vec<ItemId> = pool
                .iter()
                .copied()
                .filter(|&i| self.c.item_size(i) <= free)
                .collect();
            let Some(pick) = fitting
                .iter()
                .rev()
                .find(|&&i| self.c.item_size(i) >= need)
                .or(fitting.first())
                .copied()
            else {
                break;
            };
            used += self.c.item_size(pick);
            pool.retain(|&i| i != pick);
            pulls.push(pick);
        }
        let pull_done = used >= target || pool.is_empty();
        let own = self.c.residents(g);
        let push_ok = self.cost(&own) <= 2
            && self.c.fits(k, own.iter().map(|&i| self.c.item_size(i)).sum());
        let (push, pull) = (self.cost(&own), self.cost(&pulls));
        let newer = self.c.activation_seq(g) > self.c.activation_seq(k);
        let prefer_push = if self.has(Variant::PUSH_T) { push <= pull } else { push < pull || (push == pull && newer) };
        if push_ok && (!pull_done || prefer_push) {
            for i in own {
                self.relocate(i, k)?;
            }
        } else {
            for i in pulls {
                self.relocate(i, g)?;
            }
        }
        Ok(())
    }

    /// Runs deferred repairs, then restores every invariant that still fails.
    pub fn flush(&mut self) -> Result<()> {
        let dirty = self.deferred.take().unwrap_or_default();
        let mut order: Vec<GpuId> = dirty.into_iter().collect();
        order.sort_by_key(|&g| self.c.activation_seq(g));
        for g in order {
            if self.c.gpu(g).is_some() {
                self.repair_now(g)?;
            }
        }
        self.settle()
    }

    /// Repairs violating GPUs until none remain or no repair makes progress.
    pub fn settle(&mut self) -> Result<()> {
        let mut stuck: BTreeSet<(GpuId, Property)> = BTreeSet::new();
        let limit = 4 * (self.c.gpus().count() + 4);
        for _ in 0..limit {
            let Some(v) = current_violations(self.c)
                .into_iter()
                .find(|v| !stuck.contains(&(v.gpu, v.property)))
            else {
                break;
            };
            let before = self.moves.len();
            if v.property == Property::LoneLargeFit {
                self.fix_l(v.gpu)?;
            } else if let Some(extra) = self.extra_t_on_medium(v.gpu) {
                self.detach(extra);
                self.allocate_item(extra, &[v.gpu])?;
            } else {
                self.repair_now(v.gpu)?;
            }
            if self.moves.len() == before {
                stuck.insert((v.gpu, v.property));
            }
        }
        Ok(())
    }

    fn extra_t_on_medium(&self, g: GpuId) -> Option<ItemId> {
        if self.cat(g) != Some(SizeClass::M) {
            return None;
        }
        let ts = self.t_items(g);
        (ts.len() > 1).then(|| ts[ts.len() - 1])
    }

    // ---- operations -------------------------------------------------------

    /// Joins a Tiny request to a group with room, or starts a new group.
    pub fn group_tiny(&mut self, r: RequestId, avoid: Option<GroupId>) -> Result<()> {
        let size = self.c.request_size(r).ok_or(Error::UnknownRequest(r))?;
        let cap = self.c.capacity() as u128;
        let target = self
            .c
            .groups()
            .filter(|g| Some(g.id) != avoid)
            .filter(|g| 8 * g.aggregate_bytes as u128 <= cap)
            .filter(|g| 4 * (g.aggregate_bytes as u128 + size as u128) <= cap)
            .find_map(|g| {
                let gpu = self.c.item_gpu(ItemId::Group(g.id))?;
                self.c.fits(gpu, size).then_some((g.id, gpu))
            });
        let item = ItemId::Request(r);
        match target {
            Some((gid, gpu)) => {
                self.c.join_group(r, gid)?;
                let src = self.origin.remove(&item);
                self.moves.push(Move {
                    item,
                    src,
                    dst: gpu,
                    reason: self.reason,
                });
            }
            None => {
                let gid = self.c.new_group();
                self.c.join_group(r, gid)?;
                if let Some(src) = self.origin.remove(&item) {
                    self.origin.insert(ItemId::Group(gid), src);
                }
                self.alloc_t(ItemId::Group(gid), &[])?;
            }
        }
        Ok(())
    }

    /// Merges co-located groups while their combined size stays within C/4. This
    /// is bookkeeping only: no bytes move.
    pub fn consolidate_groups(&mut self) -> Result<()> {
        if !self.has(Variant::CONSOLIDATE) {
            return Ok(());
        }
        let cap = self.c.capacity() as u128;
        for g in self.c.gpu_ids() {
            let mut groups: Vec<(u64, GroupId)> = self
                .c
                .residents(g)
                .into_iter()
                .filter_map(|i| match i {
                    ItemId::Group(id) => Some((self.c.item_size(i), id)),
                    ItemId::Request(_) => None,
                })
                .collect();
            groups.sort();
            // Smallest groups first: fold each into the largest partner it fits with.
            while groups.len() > 1 {
                let (small, sid) = groups[0];
                let Some(pos) = (1..groups.len())
                    .rev()
                    .find(|&p| 4 * (groups[p].0 as u128 + small as u128) <= cap)
                else {
                    break;
                };
                let (big, bid) = groups[pos];
                self.c.merge_groups(bid, sid)?;
                groups[pos] = (big + small, bid);
                groups.remove(0);
                groups.sort();
            }
        }
        Ok(())
    }

    pub fn allocate(&mut self, r: RequestId) -> Result<()> {
        if self.c.gpu_of_request(r).is_some() {
            return Err(Error::Precondition(format!("{r} is already placed")));
        }
        let class = self.c.request_class(r).ok_or(Error::UnknownRequest(r))?;
        if class == SizeClass::Tiny {
            self.group_tiny(r, None)?;
        } else {
            self.allocate_item(ItemId::Request(r), &[])?;
        }
        self.c.set_scheduled_class(r, class);
        Ok(())
    }

    pub fn depart(&mut self, r: RequestId) -> Result<()> {
        let class = self.c.request_class(r).ok_or(Error::UnknownRequest(r))?;
        let item = self.c.item_of(r).ok_or(Error::UnknownRequest(r))?;
        let gpu = self.c.item_gpu(item);
        match item {
            ItemId::Group(_) => {
                self.c.leave_group(r);
            }
            ItemId::Request(_) => {
                self.c.unplace(item);
            }
        }
        self.c.retire(r)?;
        let Some(gpu) = gpu else { return Ok(()) };
        if class == SizeClass::L
            && item == ItemId::Request(r)
            && self.deferred.is_none()
            && !self.has(Variant::KEEP_PARTNER)
        {
            for m in self.ms_requests(gpu) {
                if self.has(Variant::FETCH_LONE_L) {
                    self.fetch_lone_l(m, gpu)?;
                } else {
                    self.try_beside_lone_l(m, &[gpu])?;
                }
            }
        }
        self.repair(gpu)
    }

    pub fn update(&mut self, r: RequestId) -> Result<()> {
        let tracked = self.c.request(r).ok_or(Error::UnknownRequest(r))?;
        let old = tracked.class;
        let group = tracked.group;
        let new = self.c.request_class(r).expect("known request");
        let gpu = self.c.gpu_of_request(r).ok_or(Error::NotPlaced(r))?;
        self.c.set_scheduled_class(r, new);

        if let Some(gid) = group {
            if new == SizeClass::Tiny {
                self.split_group(gid, gpu)?;
                if self.c.overloaded(gpu) {
                    let item = self.c.item_of(r).expect("known request");
                    self.resolve_overload(gpu, item)?;
                }
            } else {
                self.c.leave_group(r);
                self.note_origin(ItemId::Request(r), gpu);
                let dst = self.allocate_item(ItemId::Request(r), &[])?;
                if dst != gpu {
                    self.repair(gpu)?;
                }
            }
            return Ok(());
        }

        let item = ItemId::Request(r);
        if new == old {
            if self.c.overloaded(gpu) {
                self.resolve_overload(gpu, item)?;
            }
            return Ok(());
        }
        if new == SizeClass::L {
            let other_l = self
                .c
                .residents(gpu)
                .into_iter()
                .any(|i| i != item && self.c.item_class(i) == SizeClass::L);
            if other_l {
                self.detach(item);
                self.alloc_l(item, &[gpu])?;
            } else if self.c.overloaded(gpu) {
                return self.resolve_overload(gpu, item);
            }
            return self.repair(gpu);
        }
        if self.can_stay(item, gpu) {
            return self.repair(gpu);
        }
        self.detach(item);
        let dst = self.allocate_item(item, &[])?;
        if dst != gpu {
            self.repair(gpu)?;
        }
        Ok(())
    }

    /// Whether an S/M request that just changed class is already validly placed.
    fn can_stay(&self, item: ItemId, g: GpuId) -> bool {
        if self.c.overloaded(g) {
            return false;
        }
        let class = self.c.item_class(item);
        let others: Vec<ItemId> = self.c.residents(g).into_iter().filter(|&i| i != item).collect();
        if let Some(l) = largest_l(self.c, g) {
            let other_ms = others
                .iter()
                .any(|&i| matches!(i, ItemId::Request(_)) && self.c.item_class(i).is_medium_or_small());
            return !other_ms
                && (l as u128) + (self.c.item_size(item) as u128) < self.c.capacity() as u128;
        }
        let same = others.iter().filter(|&&i| self.c.item_class(i) == class).count();
        let ts = others.iter().filter(|&&i| self.c.item_class(i).is_tiny_or_t()).count();
        let foreign = others
            .iter()
            .filter(|&&i| {
                let c = self.c.item_class(i);
                c != class && !c.is_tiny_or_t()
            })
            .count();
        match class {
            SizeClass::M => foreign == 0 && same < 2 && ts <= 1,
            SizeClass::S => foreign == 0 && same < 3 && ts == 0,
            _ => false,
        }
    }

    /// Evicts items from an overloaded GPU and reallocates them elsewhere.
    ///
    /// A grown L-request keeps its GPU and sheds T-items first, then M/S-requests.
    /// Anything else sheds other T-items first and otherwise moves itself.
    fn resolve_overload(&mut self, g: GpuId, grown: ItemId) -> Result<()> {
        let grown_l = self.c.item_class(grown) == SizeClass::L;
        let mut evicted = Vec::new();
        while self.c.overloaded(g) {
            let ts: Vec<ItemId> = self.t_items(g).into_iter().filter(|&i| i != grown).collect();
            let pick = if let Some(&t) = ts.first() {
                t
            } else if grown_l {
                match self.ms_requests(g).into_iter().find(|&i| i != grown) {
                    Some(i) => i,
                    None => break,
                }
            } else {
                grown
            };
            self.detach(pick);
            evicted.push(pick);
            if pick == grown {
                break;
            }
        }
        // Only shed what is needed: put back small items that fit again.
        for i in self.by_size_desc(evicted.clone()).into_iter().rev() {
            if i != grown && self.c.fits(g, self.c.item_size(i)) && self.c.item_class(i).is_tiny_or_t() {
                self.attach(i, g)?;
                evicted.retain(|&e| e != i);
            }
        }
        self.reallocate_all(evicted, &[g])?;
        self.repair(g)
    }

    /// Splits a group that grew past C/4 by regrouping its largest members.
    fn split_group(&mut self, gid: GroupId, gpu: GpuId) -> Result<()> {
        let cap = self.c.capacity() as u128;
        let mut popped = Vec::new();
        while let Some(g) = self.c.group(gid) {
            if 4 * g.aggregate_bytes as u128 <= cap || g.members.len() <= 1 {
                break;
            }
            let largest = *g
                .members
                .iter()
                .max_by_key(|&&m| (self.c.request_size(m).unwrap_or(0), std::cmp::Reverse(m)))
                .expect("non-empty group");
            self.c.leave_group(largest);
            self.note_origin(ItemId::Request(largest), gpu);
            popped.push(largest);
        }
        for m in popped {
            if self.c.request_class(m) == Some(SizeClass::Tiny) {
                self.group_tiny(m, Some(gid))?;
            } else {
                self.allocate_item(ItemId::Request(m), &[])?;
            }
        }
        Ok(())
    }
}
