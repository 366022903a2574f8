//! Predictive buffer management: every resident page is filed under the
//! estimated time until a registered scan next consumes it, and eviction
//! takes the pages needed furthest in the future.

use crate::list::{ListHead, NodeArena, NodeRef, TouchStats};
use crate::policy::{ReplacementPolicy, ScanAware, ScanError, ScanId};
use crate::storage::{ColumnId, PageId, TableModel, TupleRange};
use crate::{FastMap, SimTime};

pub const NANOS_PER_MILLI: u64 = 1_000_000;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct PbmConfig {
    pub groups: usize,
    pub buckets_per_group: usize,
    pub time_slice: SimTime,
    /// Weight of the newest sample in the speed average.
    pub alpha: f64,
    /// Speed assumed before the first report, tuples per second.
    pub initial_speed: f64,
    pub speed_floor: f64,
}

impl Default for PbmConfig {
    fn default() -> Self {
        Self {
            groups: 5,
            buckets_per_group: 10,
            time_slice: 100 * NANOS_PER_MILLI,
            alpha: 0.3,
            initial_speed: 25_000.0,
            speed_floor: 1.0,
        }
    }
}

/// Groups needed so the timeline covers `[0, max_time)`.
pub fn groups_for_horizon(max_time: SimTime, buckets_per_group: usize, time_slice: SimTime) -> usize {
    let base = buckets_per_group as f64 * time_slice as f64;
    let ratio = max_time as f64 / base;
    if ratio <= 1.0 {
        return 1;
    }
    ratio.log2().ceil() as usize + 1
}

/// Where a page sits in the timeline.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Slot {
    NotRequested,
    /// Requested bucket, by stable bucket id (buckets move between positions).
    Bucket(u32),
}

/// Exponentially grouped buckets plus the LRU-ordered not-requested bucket.
#[derive(Debug)]
pub struct BucketTimeline {
    groups: usize,
    per_group: usize,
    time_slice: SimTime,
    /// Slices elapsed since the epoch.
    slices_passed: u64,
    /// Bucket id at each position.
    positions: Vec<u32>,
    /// List per bucket id, and the position each live id occupies.
    lists: Vec<ListHead>,
    position_of: Vec<usize>,
    free_ids: Vec<u32>,
    not_requested: ListHead,
    arena: NodeArena<PageId>,
}

impl BucketTimeline {
    pub fn new(groups: usize, per_group: usize, time_slice: SimTime) -> Self {
        let groups = groups.max(1);
        let per_group = per_group.max(1);
        let n = groups * per_group;
        Self {
            groups,
            per_group,
            time_slice: time_slice.max(1),
            slices_passed: 0,
            positions: (0..n as u32).collect(),
            lists: vec![ListHead::default(); n],
            position_of: (0..n).collect(),
            free_ids: Vec::new(),
            not_requested: ListHead::default(),
            arena: NodeArena::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn time_slice(&self) -> SimTime {
        self.time_slice
    }

    pub fn time_passed(&self) -> SimTime {
        self.slices_passed * self.time_slice
    }

    /// Span of the bucket at `position`, in slices.
    fn span_slices(&self, position: usize) -> u64 {
        1 << (position / self.per_group)
    }

    pub fn span(&self, position: usize) -> SimTime {
        self.span_slices(position) * self.time_slice
    }

    /// Time covered by the whole requested timeline.
    pub fn horizon(&self) -> SimTime {
        self.per_group as u64 * ((1u64 << self.groups) - 1) * self.time_slice
    }

    /// Position whose bucket currently covers `t`, measured from the last
    /// refresh. A bucket in group `g` lags its static span by the slices
    /// passed since the group last shifted; later times clamp to the last.
    pub fn time_to_position(&self, t: SimTime) -> usize {
        let m = self.per_group as u64;
        let u = t / self.time_slice;
        for g in 0..self.groups as u64 {
            let v = u + self.slices_passed % (1 << g);
            if v < m * ((1 << (g + 1)) - 1) {
                let start = m * ((1 << g) - 1);
                return (g * m + ((v - start) >> g)) as usize;
            }
        }
        self.len() - 1
    }

    pub fn position(&self, slot: Slot) -> Option<usize> {
        match slot {
            Slot::NotRequested => None,
            Slot::Bucket(id) => Some(self.position_of[id as usize]),
        }
    }

    pub fn slot_at(&self, position: usize) -> Slot {
        Slot::Bucket(self.positions[position])
    }

    pub fn bucket_len(&self, slot: Slot) -> usize {
        match slot {
            Slot::NotRequested => self.not_requested.len(),
            Slot::Bucket(id) => self.lists[id as usize].len(),
        }
    }

    pub fn pages_in(&self, slot: Slot) -> Vec<PageId> {
        match slot {
            Slot::NotRequested => self.arena.iter_back(&self.not_requested).collect(),
            Slot::Bucket(id) => self.arena.iter_back(&self.lists[id as usize]).collect(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.not_requested.len() + self.positions.iter().map(|&id| self.lists[id as usize].len()).sum::<usize>()
    }

    pub fn touch_stats(&self) -> TouchStats {
        self.arena.stats()
    }

    fn list_mut(&mut self, slot: Slot) -> &mut ListHead {
        match slot {
            Slot::NotRequested => &mut self.not_requested,
            Slot::Bucket(id) => &mut self.lists[id as usize],
        }
    }

    pub fn add(&mut self, slot: Slot, page: PageId) -> NodeRef {
        let mut list = *self.list_mut(slot);
        let node = self.arena.push_front(&mut list, page);
        *self.list_mut(slot) = list;
        node
    }

    pub fn remove(&mut self, slot: Slot, node: NodeRef) -> PageId {
        let mut list = *self.list_mut(slot);
        let page = self.arena.remove(&mut list, node);
        *self.list_mut(slot) = list;
        page
    }

    /// Eviction order: not-requested least recent first, then requested
    /// buckets from the furthest position down, oldest entry first.
    pub fn victims(&self) -> impl Iterator<Item = PageId> + '_ {
        self.arena
            .iter_back(&self.not_requested)
            .chain(self.positions.iter().rev().flat_map(move |&id| self.arena.iter_back(&self.lists[id as usize])))
    }

    fn new_bucket(&mut self, position: usize) -> u32 {
        match self.free_ids.pop() {
            Some(id) => {
                self.position_of[id as usize] = position;
                id
            }
            None => {
                self.lists.push(ListHead::default());
                self.position_of.push(position);
                (self.lists.len() - 1) as u32
            }
        }
    }

    /// Advance one slice. Buckets whose span divides the elapsed time move
    /// one position left; the bucket leaving position 0 is emptied and its
    /// pages returned for re-filing.
    pub fn refresh(&mut self) -> Vec<PageId> {
        self.slices_passed += 1;
        let n = self.len();
        let mut vacated = vec![false; n];
        let mut dropped = None;
        for i in 0..n {
            if !self.slices_passed.is_multiple_of(self.span_slices(i)) {
                continue;
            }
            let id = self.positions[i];
            if i == 0 {
                dropped = Some(id);
            } else {
                self.positions[i - 1] = id;
                self.position_of[id as usize] = i - 1;
                vacated[i - 1] = false;
            }
            vacated[i] = true;
        }
        for (i, _) in vacated.iter().enumerate().filter(|(_, v)| **v) {
            self.positions[i] = self.new_bucket(i);
        }
        let mut drained = Vec::new();
        if let Some(id) = dropped {
            let mut list = self.lists[id as usize];
            drained = self.arena.drain(&mut list);
            self.lists[id as usize] = list;
            self.free_ids.push(id);
        }
        drained
    }
}

/// Result of a next-consumption estimate.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum NextUse {
    NotRequested,
    In(SimTime),
}

#[derive(Clone, Debug)]
struct ColumnProgress {
    consumed: u64,
    last_report: SimTime,
    /// Registered pages in consumption order with their tuples-behind.
    pages: Vec<(PageId, u64)>,
}

#[derive(Clone, Debug)]
struct ScanInfo {
    columns: FastMap<ColumnId, ColumnProgress>,
    speed: f64,
    sampled: bool,
}

#[derive(Clone, Debug, Default)]
struct PageMeta {
    consuming: Vec<(ScanId, u64)>,
    resident: bool,
    pinned: bool,
    slot: Option<(Slot, NodeRef)>,
}

/// Counters from the optional self-checks.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct PbmAudit {
    pub refreshes: u64,
    pub consistency_checks: u64,
    pub consistency_violations: u64,
    pub conservation_checks: u64,
    pub conservation_violations: u64,
    pub order_checks: u64,
    pub order_violations: u64,
}

#[derive(Debug)]
pub struct Pbm {
    config: PbmConfig,
    timeline: BucketTimeline,
    scans: FastMap<ScanId, ScanInfo>,
    pages: FastMap<PageId, PageMeta>,
    next_scan: ScanId,
    now: SimTime,
    /// Instant of the last refresh; bucket boundaries are fixed relative to it.
    last_refresh: SimTime,
    audit_enabled: bool,
    audit: PbmAudit,
}

impl Pbm {
    pub fn new(config: PbmConfig) -> Self {
        let timeline = BucketTimeline::new(config.groups, config.buckets_per_group, config.time_slice);
        Self {
            config,
            timeline,
            scans: FastMap::default(),
            pages: FastMap::default(),
            next_scan: 0,
            now: 0,
            last_refresh: 0,
            audit_enabled: false,
            audit: PbmAudit::default(),
        }
    }

    /// Enables the per-refresh and per-nomination self-checks.
    pub fn with_audit(mut self) -> Self {
        self.audit_enabled = true;
        self
    }

    pub fn config(&self) -> &PbmConfig {
        &self.config
    }

    pub fn timeline(&self) -> &BucketTimeline {
        &self.timeline
    }

    pub fn audit(&self) -> PbmAudit {
        self.audit
    }

    pub fn scan_count(&self) -> usize {
        self.scans.len()
    }

    pub fn speed(&self, scan: ScanId) -> Option<f64> {
        self.scans.get(&scan).map(|s| s.speed)
    }

    pub fn consuming_scans(&self, page: PageId) -> Vec<(ScanId, u64)> {
        self.pages.get(&page).map(|m| m.consuming.clone()).unwrap_or_default()
    }

    pub fn slot_of(&self, page: PageId) -> Option<Slot> {
        self.pages.get(&page).and_then(|m| m.slot.map(|(s, _)| s))
    }

    /// Timeline position of a page, `None` when unfiled or not requested.
    pub fn position_of(&self, page: PageId) -> Option<usize> {
        self.slot_of(page).and_then(|s| self.timeline.position(s))
    }

    fn estimate_for(&self, scan: &ScanInfo, column: ColumnId, behind: u64, now: SimTime) -> Option<SimTime> {
        let progress = scan.columns.get(&column)?;
        if behind < progress.consumed {
            return None;
        }
        let secs = (behind - progress.consumed) as f64 / scan.speed;
        let ns = (secs * 1e9) as SimTime;
        Some(ns.saturating_sub(now.saturating_sub(progress.last_report)))
    }

    /// Time until the nearest registered scan reaches `page`, dropping
    /// entries of finished scans and of scans already past the page.
    pub fn page_next_consumption(&mut self, page: PageId, now: SimTime) -> NextUse {
        let Some(meta) = self.pages.get_mut(&page) else {
            return NextUse::NotRequested;
        };
        let mut consuming = std::mem::take(&mut meta.consuming);
        let mut best: Option<SimTime> = None;
        consuming.retain(|&(id, behind)| {
            let Some(scan) = self.scans.get(&id) else { return false };
            match self.estimate_for(scan, page.column, behind, now) {
                Some(t) => {
                    best = Some(best.map_or(t, |b| b.min(t)));
                    true
                }
                None => false,
            }
        });
        self.pages.get_mut(&page).expect("meta present").consuming = consuming;
        best.map_or(NextUse::NotRequested, NextUse::In)
    }

    /// Same estimate without mutating anything.
    fn peek_next_consumption(&self, page: PageId, now: SimTime) -> NextUse {
        let Some(meta) = self.pages.get(&page) else {
            return NextUse::NotRequested;
        };
        meta.consuming
            .iter()
            .filter_map(|&(id, behind)| self.estimate_for(self.scans.get(&id)?, page.column, behind, now))
            .min()
            .map_or(NextUse::NotRequested, NextUse::In)
    }

    fn unfile(&mut self, page: PageId) {
        if let Some(meta) = self.pages.get_mut(&page) {
            if let Some((slot, node)) = meta.slot.take() {
                self.timeline.remove(slot, node);
            }
        }
    }

    /// Re-file a resident unpinned page under its current estimate.
    pub fn page_push(&mut self, page: PageId, now: SimTime) {
        self.unfile(page);
        let filable = self.pages.get(&page).is_some_and(|m| m.resident && !m.pinned);
        if !filable {
            return;
        }
        let slot = match self.page_next_consumption(page, now) {
            NextUse::NotRequested => Slot::NotRequested,
            NextUse::In(t) => {
                let since_refresh = now.saturating_sub(self.last_refresh);
                self.timeline.slot_at(self.timeline.time_to_position(t.saturating_add(since_refresh)))
            }
        };
        let node = self.timeline.add(slot, page);
        self.pages.get_mut(&page).expect("meta present").slot = Some((slot, node));
    }

    fn forget_if_idle(&mut self, page: PageId) {
        if self.pages.get(&page).is_some_and(|m| !m.resident && m.consuming.is_empty()) {
            self.pages.remove(&page);
        }
    }

    /// Advance the timeline one slice and re-file the pages that fell off it.
    pub fn refresh_requested_buckets(&mut self, now: SimTime) {
        self.now = now;
        self.last_refresh = now;
        for page in self.timeline.refresh() {
            if let Some(meta) = self.pages.get_mut(&page) {
                meta.slot = None;
            }
            self.page_push(page, now);
        }
        self.audit.refreshes += 1;
        if self.audit_enabled {
            self.check_consistency(now);
        }
    }

    /// Every requested page sits within one position of where a fresh
    /// estimate would put it.
    pub fn check_consistency(&mut self, now: SimTime) -> u64 {
        let mut violations = 0;
        for pos in 0..self.timeline.len() {
            for page in self.timeline.pages_in(self.timeline.slot_at(pos)) {
                self.audit.consistency_checks += 1;
                let fresh = match self.peek_next_consumption(page, now) {
                    NextUse::NotRequested => continue,
                    NextUse::In(t) => self.timeline.time_to_position(t),
                };
                if fresh.abs_diff(pos) > 1 {
                    violations += 1;
                }
            }
        }
        self.audit.consistency_violations += violations;
        violations
    }

    /// Every page in `unpinned` is filed exactly once and nothing else is.
    pub fn check_conservation(&mut self, unpinned: &[PageId]) -> u64 {
        self.audit.conservation_checks += 1;
        let mut seen: FastMap<PageId, u32> = FastMap::default();
        for page in self.timeline.pages_in(Slot::NotRequested) {
            *seen.entry(page).or_default() += 1;
        }
        for pos in 0..self.timeline.len() {
            for page in self.timeline.pages_in(self.timeline.slot_at(pos)) {
                *seen.entry(page).or_default() += 1;
            }
        }
        let mut violations = unpinned.iter().filter(|p| seen.get(p) != Some(&1)).count() as u64;
        violations += seen.len().abs_diff(unpinned.len()) as u64;
        self.audit.conservation_violations += violations;
        violations
    }

    fn speed_sample(&mut self, scan: ScanId, tuples: u64, elapsed: SimTime) {
        if elapsed == 0 {
            return;
        }
        let info = self.scans.get_mut(&scan).expect("scan checked");
        let sample = tuples as f64 * 1e9 / elapsed as f64;
        info.speed =
            if info.sampled { self.config.alpha * sample + (1.0 - self.config.alpha) * info.speed } else { sample };
        info.speed = info.speed.max(self.config.speed_floor);
        info.sampled = true;
    }

    /// Re-file the scan's resident pages still ahead of it, so a speed change
    /// is reflected right away.
    fn repush_ahead(&mut self, scan: ScanId, now: SimTime) {
        let Some(info) = self.scans.get(&scan) else { return };
        let ahead: Vec<PageId> = info
            .columns
            .values()
            .flat_map(|c| {
                let from = c.pages.partition_point(|&(_, behind)| behind < c.consumed);
                c.pages[from..].iter().map(|&(p, _)| p)
            })
            .filter(|p| self.pages.get(p).is_some_and(|m| m.slot.is_some()))
            .collect();
        for page in ahead {
            self.page_push(page, now);
        }
    }
}

impl ScanAware for Pbm {
    fn register_scan(
        &mut self,
        table: &TableModel,
        columns: &[ColumnId],
        ranges: &[TupleRange],
        now: SimTime,
    ) -> Result<ScanId, ScanError> {
        self.next_scan += 1;
        let id = self.next_scan;
        let mut progress = FastMap::default();
        let mut touched = Vec::new();
        for &col in columns {
            let mut behind = 0u64;
            let mut pages = Vec::new();
            for range in ranges {
                for page in table.pages_for_range(col, *range)? {
                    let span = table.page_span(col, page.index)?;
                    pages.push((page, behind));
                    self.pages.entry(page).or_default().consuming.push((id, behind));
                    behind += span.intersect(range).map_or(0, |r| r.len());
                    touched.push(page);
                }
            }
            progress.insert(col, ColumnProgress { consumed: 0, last_report: now, pages });
        }
        self.scans.insert(id, ScanInfo { columns: progress, speed: self.config.initial_speed, sampled: false });
        for page in touched {
            if self.pages.get(&page).is_some_and(|m| m.resident) {
                self.page_push(page, now);
            }
        }
        Ok(id)
    }

    fn report_scan_position(
        &mut self,
        scan: ScanId,
        column: ColumnId,
        tuples_consumed: u64,
        now: SimTime,
    ) -> Result<(), ScanError> {
        let info = self.scans.get_mut(&scan).ok_or(ScanError::UnknownScan(scan))?;
        let progress = info.columns.get_mut(&column).ok_or(ScanError::UnknownColumn { scan, column })?;
        if tuples_consumed < progress.consumed {
            return Err(ScanError::PositionRegressed { scan, reported: tuples_consumed, current: progress.consumed });
        }
        let delta = tuples_consumed - progress.consumed;
        let elapsed = now.saturating_sub(progress.last_report);
        progress.consumed = tuples_consumed;
        progress.last_report = now;
        self.speed_sample(scan, delta, elapsed);
        self.repush_ahead(scan, now);
        Ok(())
    }

    fn page_consumed(&mut self, scan: ScanId, page: PageId) {
        let Some(meta) = self.pages.get_mut(&page) else { return };
        if let Some(i) =
            meta.consuming.iter().enumerate().filter(|(_, e)| e.0 == scan).min_by_key(|(_, e)| e.1).map(|(i, _)| i)
        {
            meta.consuming.swap_remove(i);
        }
        if meta.slot.is_some() {
            self.page_push(page, self.now);
        }
        self.forget_if_idle(page);
    }

    fn unregister_scan(&mut self, scan: ScanId, _now: SimTime) -> Result<(), ScanError> {
        self.scans.remove(&scan).map(|_| ()).ok_or(ScanError::UnknownScan(scan))
    }

    fn tick(&mut self, now: SimTime) {
        self.refresh_requested_buckets(now);
    }

    fn wants_ticks(&self) -> bool {
        true
    }
}

impl ReplacementPolicy for Pbm {
    fn on_access(&mut self, page: PageId, now: SimTime) {
        self.now = now;
        if self.pages.get(&page).is_some_and(|m| m.slot.is_some()) {
            self.page_push(page, now);
        }
    }

    fn on_loaded(&mut self, page: PageId, now: SimTime) {
        self.now = now;
        let meta = self.pages.entry(page).or_default();
        meta.resident = true;
        meta.pinned = false;
        self.page_push(page, now);
    }

    fn on_pinned(&mut self, page: PageId, now: SimTime) {
        self.now = now;
        self.unfile(page);
        if let Some(meta) = self.pages.get_mut(&page) {
            meta.pinned = true;
        }
    }

    fn on_unpinned(&mut self, page: PageId, now: SimTime) {
        self.now = now;
        if let Some(meta) = self.pages.get_mut(&page) {
            meta.pinned = false;
        }
        self.page_push(page, now);
    }

    fn select_victims(&mut self, k: usize, now: SimTime) -> Vec<PageId> {
        self.now = now;
        let victims: Vec<PageId> = self.timeline.victims().take(k).collect();
        if self.audit_enabled {
            self.check_victim_order(&victims);
        }
        victims
    }

    fn on_evicted(&mut self, page: PageId) {
        self.unfile(page);
        if let Some(meta) = self.pages.get_mut(&page) {
            meta.resident = false;
            meta.pinned = false;
        }
        self.forget_if_idle(page);
    }
}

impl Pbm {
    /// No surviving requested page may sit further out than a requested victim.
    fn check_victim_order(&mut self, victims: &[PageId]) {
        self.audit.order_checks += 1;
        let rank = |slot: Option<Slot>, tl: &BucketTimeline| match slot {
            Some(Slot::NotRequested) => usize::MAX,
            Some(s) => tl.position(s).unwrap_or(0),
            None => 0,
        };
        let Some(lowest_victim) = victims.iter().map(|&p| rank(self.slot_of(p), &self.timeline)).min() else {
            return;
        };
        let chosen: std::collections::HashSet<PageId> = victims.iter().copied().collect();
        let highest_survivor = (0..self.timeline.len())
            .rev()
            .find(|&pos| self.timeline.pages_in(self.timeline.slot_at(pos)).iter().any(|p| !chosen.contains(p)));
        let survivor_nr = self.timeline.pages_in(Slot::NotRequested).iter().any(|p| !chosen.contains(p));
        if (survivor_nr && lowest_victim != usize::MAX) || highest_survivor.is_some_and(|s| s > lowest_victim) {
            self.audit.order_violations += 1;
        }
    }
}
