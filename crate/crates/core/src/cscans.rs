//! Cooperative scans: an active buffer manager that decides which chunk to
//! load, which chunk to hand to which scan, and which chunk to drop, serving
//! scans out of order when they allow it.
//!
//! Chunks are stable-position ranges; each scan registers visible-row ranges
//! and gets back, per delivered chunk, the trimmed row ranges it may produce.
//! Chunk metadata is keyed by the physical pages the chunk resolves to, so
//! snapshots that share a page prefix share the metadata of those chunks.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::delta::{DeltaError, DeltaList, ProcessedSet};
use crate::io::IoModel;
use crate::policy::ReplacementPolicy;
use crate::pool::{Access, BufferPool, PoolError};
use crate::storage::{
    ChunkId, ColumnId, PageId, Snapshot, StorageError, TableId, TableModel, TableVersion, TupleRange,
};
use crate::{FastMap, SimTime};

pub type CScanId = u64;

/// Added to a chunk's interest count when its pages are shared by snapshots.
pub const SHARED_BONUS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AbmError {
    #[error("unknown cscan {0}")]
    UnknownCScan(CScanId),
    #[error("cscan {0} asked for a chunk before finishing the previous one")]
    ChunkInProgress(CScanId),
    #[error("cscan {0} has no chunk in progress")]
    NoChunkInProgress(CScanId),
    #[error("delta list covers {deltas} stable tuples but the snapshot has {snapshot}")]
    SnapshotMismatch { deltas: u64, snapshot: u64 },
    #[error("row range {0} is unsorted, overlapping or past the visible rows")]
    BadRange(TupleRange),
    #[error("cscan {cscan} produced {produced} tuples, registered {expected}")]
    TupleConservation { cscan: CScanId, expected: u64, produced: u64 },
    #[error("no progress possible: {pinned} frames pinned, chunk needs {needed}, {free} free")]
    Stalled { pinned: usize, needed: usize, free: usize },
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Delta(#[from] DeltaError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// How a new scan's snapshot relates to what the manager already tracks.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RegistrationCase {
    /// First scan of the table: chunk metadata created.
    NewTable,
    /// Same pages as a live scan: nothing to change.
    IdenticalSnapshot,
    /// Shares a page prefix with a live scan: shared/local marks recomputed.
    CommonPrefix,
    /// No pages in common with live scans: a new version is tracked.
    NewVersion,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub cscan: CScanId,
    pub chunk: ChunkId,
    /// Row ranges this chunk contributes, already trimmed of rows delivered
    /// with earlier chunks.
    pub rid_ranges: Vec<TupleRange>,
    pub tuples: u64,
    /// Pages pinned for the scan until it reports the chunk done.
    pub pages: Vec<PageId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChunkRequest {
    Ready(Delivery),
    Blocked,
    Done,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Schedule {
    /// Blocked scans that now have a delivery waiting.
    pub woken: Vec<CScanId>,
    /// Page loads issued, with their completion times.
    pub loads: Vec<(PageId, SimTime)>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct AbmStats {
    pub chunk_loads: u64,
    pub deliveries: u64,
    pub keep_evictions: u64,
    pub orphan_evictions: u64,
    pub forced_evictions: u64,
}

/// Sort key of a scan's claim on the manager's attention; smaller is served first.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct QueryRank {
    pub not_starved: bool,
    pub remaining: usize,
    pub id: CScanId,
}

#[derive(Clone, Debug)]
struct ChunkMeta {
    version: TableVersion,
    index: u64,
    sid_range: TupleRange,
    /// Pages and snapshot positions per table column.
    pages: Vec<Vec<PageId>>,
    positions: Vec<std::ops::Range<usize>>,
    page_bytes: Vec<u64>,
    resident: Vec<usize>,
    interested: BTreeSet<CScanId>,
    col_interest: Vec<u32>,
    users: u32,
    shared: bool,
    key: MetaKey,
}

impl ChunkMeta {
    fn complete(&self, col_positions: &[usize]) -> bool {
        col_positions.iter().all(|&p| self.resident[p] == self.pages[p].len())
    }

    fn score(&self) -> f64 {
        self.interested.len() as f64 + if self.shared { SHARED_BONUS } else { 0.0 }
    }

    fn id(&self) -> ChunkId {
        ChunkId { table_version: self.version, index: self.index }
    }
}

type MetaKey = (TableVersion, u64, Vec<PageId>);

#[derive(Clone, Debug)]
struct CScanState {
    version: TableVersion,
    snapshot: Arc<Snapshot>,
    col_positions: Vec<usize>,
    rid_ranges: Vec<TupleRange>,
    deltas: Arc<DeltaList>,
    in_order: bool,
    /// Undelivered chunk index → meta slot.
    needed: BTreeMap<u64, usize>,
    delivered: BTreeSet<u64>,
    /// Undelivered chunks whose pages for this scan's columns are all resident.
    available: BTreeSet<u64>,
    all_chunks: Vec<usize>,
    processed: ProcessedSet,
    blocked: bool,
    pending: Option<Delivery>,
    current: Option<Vec<PageId>>,
    expected_tuples: u64,
}

impl CScanState {
    /// Next chunk it can take right now.
    fn pick_available(&self, metas: &[Option<ChunkMeta>]) -> Option<u64> {
        if self.in_order {
            let next = *self.needed.keys().next()?;
            return self.available.contains(&next).then_some(next);
        }
        self.available.iter().copied().min_by_key(|idx| {
            let meta = metas[self.needed[idx]].as_ref().expect("live meta");
            (meta.interested.len(), *idx)
        })
    }

    /// Chunks it could take next: the first needed one when in order.
    fn candidates(&self) -> impl Iterator<Item = (&u64, &usize)> {
        self.needed.iter().take(if self.in_order { 1 } else { usize::MAX })
    }

    fn starved(&self) -> bool {
        if self.in_order {
            return self.needed.keys().next().is_none_or(|n| !self.available.contains(n));
        }
        self.available.is_empty()
    }

    fn rank(&self, id: CScanId) -> QueryRank {
        QueryRank { not_starved: !self.starved(), remaining: self.needed.len(), id }
    }
}

#[derive(Clone, Debug)]
struct VersionMeta {
    table_id: TableId,
    live: BTreeSet<CScanId>,
}

/// Chunk bookkeeping; doubles as the pool's replacement policy.
#[derive(Debug, Default)]
pub struct AbmState {
    metas: Vec<Option<ChunkMeta>>,
    free_slots: Vec<usize>,
    meta_index: BTreeMap<MetaKey, usize>,
    page_metas: FastMap<PageId, Vec<usize>>,
    resident: BTreeSet<PageId>,
    orphans: BTreeSet<PageId>,
    versions: BTreeMap<TableVersion, VersionMeta>,
    cscans: BTreeMap<CScanId, CScanState>,
}

impl AbmState {
    fn meta(&self, slot: usize) -> &ChunkMeta {
        self.metas[slot].as_ref().expect("live meta")
    }

    fn meta_mut(&mut self, slot: usize) -> &mut ChunkMeta {
        self.metas[slot].as_mut().expect("live meta")
    }

    fn residency_changed(&mut self, page: PageId, loaded: bool) {
        let Some(slots) = self.page_metas.get(&page) else {
            if loaded {
                self.orphans.insert(page);
            } else {
                self.orphans.remove(&page);
            }
            return;
        };
        for &slot in slots {
            let meta = self.metas[slot].as_mut().expect("live meta");
            let Some(col) = meta.pages.iter().position(|ps| ps.contains(&page)) else { continue };
            let was_full = meta.resident[col] == meta.pages[col].len();
            if loaded {
                meta.resident[col] += 1;
            } else {
                meta.resident[col] -= 1;
            }
            let is_full = meta.resident[col] == meta.pages[col].len();
            if was_full == is_full {
                continue;
            }
            let meta = self.metas[slot].as_ref().expect("live meta");
            for id in &meta.interested {
                let scan = self.cscans.get_mut(id).expect("interested scan is live");
                if !scan.col_positions.contains(&col) {
                    continue;
                }
                if meta.complete(&scan.col_positions) {
                    scan.available.insert(meta.index);
                } else {
                    scan.available.remove(&meta.index);
                }
            }
        }
    }

    /// Keep-relevance candidates with resident pages, lowest score first;
    /// among equals the higher chunk goes first.
    fn keep_candidates(&self, protect: &BTreeSet<usize>) -> Vec<(f64, usize)> {
        let mut v: Vec<(f64, usize)> = self
            .metas
            .iter()
            .enumerate()
            .filter_map(|(slot, m)| {
                let m = m.as_ref()?;
                (!protect.contains(&slot) && m.resident.iter().any(|&r| r > 0)).then(|| (m.score(), slot))
            })
            .collect();
        v.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then_with(|| {
                let (ma, mb) = (self.meta(a.1), self.meta(b.1));
                Reverse((ma.version, ma.index)).cmp(&Reverse((mb.version, mb.index)))
            })
        });
        v
    }

    /// Resident pages of `slot` that no other interested chunk still needs.
    fn evictable_pages(&self, slot: usize, protect: &BTreeSet<usize>) -> Vec<PageId> {
        let meta = self.meta(slot);
        meta.pages
            .iter()
            .flatten()
            .filter(|p| self.resident.contains(p))
            .filter(|p| {
                self.page_metas[p].iter().all(|&other| {
                    other == slot || (!protect.contains(&other) && self.meta(other).score() <= meta.score())
                })
            })
            .copied()
            .collect()
    }
}

impl ReplacementPolicy for AbmState {
    fn on_access(&mut self, _page: PageId, _now: SimTime) {}

    fn on_loaded(&mut self, page: PageId, _now: SimTime) {
        self.resident.insert(page);
        self.residency_changed(page, true);
    }

    fn select_victims(&mut self, k: usize, _now: SimTime) -> Vec<PageId> {
        let mut out: Vec<PageId> = self.orphans.iter().copied().take(k).collect();
        for (_, slot) in self.keep_candidates(&BTreeSet::new()) {
            if out.len() >= k {
                break;
            }
            for p in self.evictable_pages(slot, &BTreeSet::new()) {
                if out.len() < k && !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }

    fn on_evicted(&mut self, page: PageId) {
        if self.resident.remove(&page) {
            self.residency_changed(page, false);
        }
    }
}

/// Longest page prefix per column common to at least two live scans.
fn shared_prefix(snapshots: &[&Snapshot]) -> Vec<Vec<PageId>> {
    let columns = snapshots.iter().map(|s| s.pages_per_column.len()).max().unwrap_or(0);
    let mut groups: Vec<(&Snapshot, usize)> = Vec::new();
    for s in snapshots {
        match groups
            .iter_mut()
            .find(|(g, _)| g.snapshot_id == s.snapshot_id || g.pages_per_column == s.pages_per_column)
        {
            Some((_, n)) => *n += 1,
            None => groups.push((s, 1)),
        }
    }
    (0..columns)
        .map(|col| {
            let list = |s: &Snapshot| s.pages_per_column.get(col).cloned().unwrap_or_default();
            let mut best: Vec<PageId> = Vec::new();
            for (i, (a, n)) in groups.iter().enumerate() {
                if *n >= 2 && list(a).len() > best.len() {
                    best = list(a);
                }
                for (b, _) in &groups[i + 1..] {
                    let (la, lb) = (list(a), list(b));
                    let lcp = la.iter().zip(&lb).take_while(|(x, y)| x == y).count();
                    if lcp > best.len() {
                        best = la[..lcp].to_vec();
                    }
                }
            }
            best
        })
        .collect()
}

/// The active buffer manager together with the pool it governs.
#[derive(Debug)]
pub struct Abm {
    pool: BufferPool,
    state: AbmState,
    next_id: CScanId,
    /// Page being loaded → chunk slot it was loaded for.
    inflight: BTreeMap<PageId, usize>,
    /// Pages still in flight per chunk slot.
    loading: BTreeMap<usize, usize>,
    stats: AbmStats,
}

impl Abm {
    pub fn new(capacity: usize, group_size: usize, io: IoModel) -> Result<Self, AbmError> {
        Ok(Self {
            pool: BufferPool::new(capacity, group_size, io)?,
            state: AbmState::default(),
            next_id: 0,
            inflight: BTreeMap::new(),
            loading: BTreeMap::new(),
            stats: AbmStats::default(),
        })
    }

    pub fn pool(&self) -> &BufferPool {
        &self.pool
    }

    pub fn stats(&self) -> AbmStats {
        self.stats
    }

    pub fn live_versions(&self) -> Vec<TableVersion> {
        self.state.versions.keys().copied().collect()
    }

    pub fn live_cscans(&self) -> usize {
        self.state.cscans.len()
    }

    fn scan(&self, id: CScanId) -> Result<&CScanState, AbmError> {
        self.state.cscans.get(&id).ok_or(AbmError::UnknownCScan(id))
    }

    /// Chunks still to be delivered to `id`, ascending.
    pub fn remaining_chunks(&self, id: CScanId) -> Result<Vec<u64>, AbmError> {
        Ok(self.scan(id)?.needed.keys().copied().collect())
    }

    pub fn query_rank(&self, id: CScanId) -> Result<QueryRank, AbmError> {
        Ok(self.scan(id)?.rank(id))
    }

    /// Number of scans still waiting for chunk `index` as `id` resolves it.
    pub fn chunk_interest(&self, id: CScanId, index: u64) -> Result<usize, AbmError> {
        let scan = self.scan(id)?;
        Ok(scan
            .all_chunks
            .iter()
            .map(|&s| self.state.meta(s))
            .find(|m| m.index == index)
            .map_or(0, |m| m.interested.len()))
    }

    pub fn chunk_shared(&self, id: CScanId, index: u64) -> Result<bool, AbmError> {
        let scan = self.scan(id)?;
        Ok(scan.all_chunks.iter().map(|&s| self.state.meta(s)).any(|m| m.index == index && m.shared))
    }

    pub fn is_available(&self, id: CScanId, index: u64) -> Result<bool, AbmError> {
        Ok(self.scan(id)?.available.contains(&index))
    }

    /// Longest prefix shared by live scans of `version`, per column.
    pub fn shared_prefix(&self, version: TableVersion) -> Vec<Vec<PageId>> {
        let snaps: Vec<&Snapshot> = self
            .state
            .versions
            .get(&version)
            .map(|v| v.live.iter().map(|id| self.state.cscans[id].snapshot.as_ref()).collect())
            .unwrap_or_default();
        shared_prefix(&snaps)
    }

    /// Pages each live scan still has to receive, with the number of scans
    /// wanting each.
    pub fn wanted_pages(&self) -> FastMap<PageId, u32> {
        let mut counts: FastMap<PageId, u32> = FastMap::default();
        for scan in self.state.cscans.values() {
            for &slot in scan.needed.values() {
                let meta = self.state.meta(slot);
                for &c in &scan.col_positions {
                    for &p in &meta.pages[c] {
                        *counts.entry(p).or_default() += 1;
                    }
                }
            }
        }
        counts
    }

    fn classify(&self, snapshot: &Snapshot) -> RegistrationCase {
        let Some(version) = self.state.versions.get(&snapshot.version) else {
            return if self.state.versions.values().any(|v| v.table_id == snapshot.table_id) {
                RegistrationCase::NewVersion
            } else {
                RegistrationCase::NewTable
            };
        };
        let live = version.live.iter().map(|id| &self.state.cscans[id].snapshot);
        let mut prefix = false;
        for other in live {
            if other.snapshot_id == snapshot.snapshot_id || other.pages_per_column == snapshot.pages_per_column {
                return RegistrationCase::IdenticalSnapshot;
            }
            prefix |= other
                .pages_per_column
                .iter()
                .zip(&snapshot.pages_per_column)
                .any(|(a, b)| !a.is_empty() && a.first() == b.first());
        }
        if prefix {
            RegistrationCase::CommonPrefix
        } else {
            RegistrationCase::NewVersion
        }
    }

    fn meta_slot(&mut self, table: &TableModel, snapshot: &Snapshot, index: u64) -> Result<usize, AbmError> {
        let cs = table.chunk_size();
        let sid_range = TupleRange::new(index * cs, ((index + 1) * cs).min(snapshot.tuple_count));
        let mut pages = Vec::new();
        let mut positions = Vec::new();
        let mut page_bytes = Vec::new();
        for col in table.columns() {
            pages.push(snapshot.resolve(table, col.column_id, sid_range)?);
            positions.push(snapshot.page_positions(table, col.column_id, sid_range)?);
            page_bytes.push(col.page_size_bytes);
        }
        let key: MetaKey = (snapshot.version, index, pages.iter().flatten().copied().collect());
        if let Some(&slot) = self.state.meta_index.get(&key) {
            return Ok(slot);
        }
        let resident: Vec<usize> =
            pages.iter().map(|ps| ps.iter().filter(|p| self.state.resident.contains(p)).count()).collect();
        let meta = ChunkMeta {
            version: snapshot.version,
            index,
            sid_range,
            col_interest: vec![0; pages.len()],
            pages,
            positions,
            page_bytes,
            resident,
            interested: BTreeSet::new(),
            users: 0,
            shared: false,
            key: key.clone(),
        };
        let slot = match self.state.free_slots.pop() {
            Some(s) => {
                self.state.metas[s] = Some(meta);
                s
            }
            None => {
                self.state.metas.push(Some(meta));
                self.state.metas.len() - 1
            }
        };
        for p in self.state.meta(slot).pages.iter().flatten().copied().collect::<Vec<_>>() {
            self.state.page_metas.entry(p).or_default().push(slot);
            self.state.orphans.remove(&p);
        }
        self.state.meta_index.insert(key, slot);
        Ok(slot)
    }

    fn drop_meta(&mut self, slot: usize) {
        let meta = self.state.metas[slot].take().expect("live meta");
        self.state.meta_index.remove(&meta.key);
        for p in meta.pages.iter().flatten() {
            let slots = self.state.page_metas.get_mut(p).expect("indexed page");
            slots.retain(|&s| s != slot);
            if slots.is_empty() {
                self.state.page_metas.remove(p);
                if self.state.resident.contains(p) {
                    self.state.orphans.insert(*p);
                }
            }
        }
        self.state.free_slots.push(slot);
    }

    fn refresh_shared(&mut self, version: TableVersion) {
        let prefix = self.shared_prefix(version);
        let slots: Vec<usize> = self
            .state
            .meta_index
            .range((version, 0, Vec::new())..)
            .take_while(|((v, _, _), _)| *v == version)
            .map(|(_, &s)| s)
            .collect();
        for slot in slots {
            let meta = self.state.meta_mut(slot);
            meta.shared = meta.positions.iter().zip(&meta.pages).enumerate().all(|(c, (pos, pages))| {
                prefix.get(c).is_some_and(|pre| pos.end <= pre.len() && pre[pos.clone()] == pages[..])
            });
        }
    }

    /// Register a scan over `rid_ranges` of the rows visible through
    /// `deltas` on top of `snapshot`.
    pub fn register_cscan(
        &mut self,
        snapshot: Arc<Snapshot>,
        table: &TableModel,
        deltas: Arc<DeltaList>,
        columns: &[ColumnId],
        rid_ranges: &[TupleRange],
        in_order: bool,
    ) -> Result<(CScanId, RegistrationCase), AbmError> {
        if deltas.stable_count() != snapshot.tuple_count {
            return Err(AbmError::SnapshotMismatch { deltas: deltas.stable_count(), snapshot: snapshot.tuple_count });
        }
        let mut prev_end = 0;
        for r in rid_ranges {
            if r.begin < prev_end || r.end > deltas.visible_count() || r.begin > r.end {
                return Err(AbmError::BadRange(*r));
            }
            prev_end = r.end;
        }
        let col_positions = columns
            .iter()
            .map(|c| table.columns().iter().position(|d| d.column_id == *c).ok_or(StorageError::UnknownColumn(*c)))
            .collect::<Result<Vec<_>, _>>()?;
        let case = self.classify(&snapshot);
        let cs = table.chunk_size();
        let mut indexes = BTreeSet::new();
        for r in rid_ranges.iter().filter(|r| !r.is_empty()) {
            let sids = deltas.rid_range_to_sid_range(*r)?;
            if !sids.is_empty() {
                indexes.extend(sids.begin / cs..(sids.end - 1) / cs + 1);
            }
        }
        self.next_id += 1;
        let id = self.next_id;
        let mut needed = BTreeMap::new();
        for idx in indexes {
            needed.insert(idx, self.meta_slot(table, &snapshot, idx)?);
        }
        let mut available = BTreeSet::new();
        for (&idx, &slot) in &needed {
            let meta = self.state.meta_mut(slot);
            meta.users += 1;
            meta.interested.insert(id);
            for &c in &col_positions {
                meta.col_interest[c] += 1;
            }
            if meta.complete(&col_positions) {
                available.insert(idx);
            }
        }
        let version = snapshot.version;
        let table_id = snapshot.table_id;
        self.state.cscans.insert(
            id,
            CScanState {
                version,
                all_chunks: needed.values().copied().collect(),
                snapshot,
                col_positions,
                rid_ranges: rid_ranges.to_vec(),
                expected_tuples: rid_ranges.iter().map(|r| r.len()).sum(),
                deltas,
                in_order,
                needed,
                delivered: BTreeSet::new(),
                available,
                processed: ProcessedSet::new(),
                blocked: false,
                pending: None,
                current: None,
            },
        );
        self.state
            .versions
            .entry(version)
            .or_insert_with(|| VersionMeta { table_id, live: BTreeSet::new() })
            .live
            .insert(id);
        if case != RegistrationCase::IdenticalSnapshot || self.state.versions[&version].live.len() == 2 {
            self.refresh_shared(version);
        }
        Ok((id, case))
    }

    fn deliver(&mut self, id: CScanId, index: u64) -> Result<Delivery, AbmError> {
        let scan = self.state.cscans.get_mut(&id).ok_or(AbmError::UnknownCScan(id))?;
        let slot = scan.needed.remove(&index).expect("needed chunk");
        scan.available.remove(&index);
        scan.delivered.insert(index);
        scan.blocked = false;
        let cols = scan.col_positions.clone();
        let meta = self.state.metas[slot].as_mut().expect("live meta");
        meta.interested.remove(&id);
        for &c in &cols {
            meta.col_interest[c] -= 1;
        }
        let meta = self.state.metas[slot].as_ref().expect("live meta");
        let chunk_rids = scan.deltas.chunk_to_rid_range(meta.sid_range)?;
        let mut rid_ranges = Vec::new();
        for r in &scan.rid_ranges {
            if let Some(piece) = chunk_rids.intersect(r) {
                rid_ranges.extend(scan.processed.trim_delivered(piece));
            }
        }
        let pages: Vec<PageId> = cols.iter().flat_map(|&c| meta.pages[c].iter().copied()).collect();
        let chunk = meta.id();
        for &p in &pages {
            self.pool.pin(&mut self.state, p, 0)?;
        }
        self.stats.deliveries += 1;
        Ok(Delivery { cscan: id, chunk, tuples: rid_ranges.iter().map(|r| r.len()).sum(), rid_ranges, pages })
    }

    /// Ask for the next chunk. `Blocked` means the scan waits until a later
    /// [`Abm::schedule`] lists it as woken.
    pub fn get_chunk(&mut self, id: CScanId) -> Result<ChunkRequest, AbmError> {
        let scan = self.state.cscans.get_mut(&id).ok_or(AbmError::UnknownCScan(id))?;
        if scan.current.is_some() {
            return Err(AbmError::ChunkInProgress(id));
        }
        if let Some(d) = scan.pending.take() {
            scan.current = Some(d.pages.clone());
            return Ok(ChunkRequest::Ready(d));
        }
        if scan.needed.is_empty() {
            return Ok(ChunkRequest::Done);
        }
        match scan.pick_available(&self.state.metas) {
            Some(index) => {
                let d = self.deliver(id, index)?;
                self.state.cscans.get_mut(&id).expect("live").current = Some(d.pages.clone());
                Ok(ChunkRequest::Ready(d))
            }
            None => {
                scan.blocked = true;
                Ok(ChunkRequest::Blocked)
            }
        }
    }

    /// The scan finished the chunk it was handed; its pages are released.
    pub fn chunk_done(&mut self, id: CScanId, now: SimTime) -> Result<(), AbmError> {
        let scan = self.state.cscans.get_mut(&id).ok_or(AbmError::UnknownCScan(id))?;
        let pages = scan.current.take().ok_or(AbmError::NoChunkInProgress(id))?;
        for p in pages {
            self.pool.unpin(&mut self.state, p, now)?;
        }
        Ok(())
    }

    pub fn unregister_cscan(&mut self, id: CScanId) -> Result<(), AbmError> {
        let scan = self.state.cscans.get(&id).ok_or(AbmError::UnknownCScan(id))?;
        if scan.current.is_some() || scan.pending.is_some() {
            return Err(AbmError::ChunkInProgress(id));
        }
        if scan.needed.is_empty() && scan.processed.total() != scan.expected_tuples {
            return Err(AbmError::TupleConservation {
                cscan: id,
                expected: scan.expected_tuples,
                produced: scan.processed.total(),
            });
        }
        let scan = self.state.cscans.remove(&id).expect("checked");
        for &slot in &scan.all_chunks {
            let meta = self.state.meta_mut(slot);
            if meta.interested.remove(&id) {
                for &c in &scan.col_positions {
                    meta.col_interest[c] -= 1;
                }
            }
            meta.users -= 1;
            if meta.users == 0 {
                self.drop_meta(slot);
            }
        }
        let version = self.state.versions.get_mut(&scan.version).expect("version of live scan");
        version.live.remove(&id);
        if version.live.is_empty() {
            self.state.versions.remove(&scan.version);
        } else {
            self.refresh_shared(scan.version);
        }
        Ok(())
    }

    /// Chunk to load next: the most urgent starved scan not already waiting
    /// on a load and not in `skip`, then its most widely wanted chunk.
    /// Scans with a chunk available get nothing, so each scan runs at most
    /// one chunk ahead.
    fn pick_load(&self, skip: &BTreeSet<CScanId>) -> Option<(CScanId, usize, f64)> {
        let mut ranked: Vec<QueryRank> = self
            .state
            .cscans
            .iter()
            .filter(|(id, s)| !s.needed.is_empty() && s.starved() && !skip.contains(id))
            .filter(|(_, s)| !s.candidates().any(|(_, slot)| self.loading.contains_key(slot)))
            .map(|(&id, s)| s.rank(id))
            .collect();
        ranked.sort();
        for rank in ranked {
            let scan = &self.state.cscans[&rank.id];
            let best = scan
                .candidates()
                .filter(|(idx, _)| !scan.available.contains(idx))
                .map(|(idx, &slot)| (self.state.meta(slot).score(), Reverse(*idx), slot))
                .max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some((score, _, slot)) = best {
                return Some((rank.id, slot, score));
            }
        }
        None
    }

    fn pages_to_load(&self, slot: usize) -> Vec<(PageId, u64)> {
        let meta = self.state.meta(slot);
        let mut out = Vec::new();
        for (c, pages) in meta.pages.iter().enumerate() {
            if meta.col_interest[c] == 0 {
                continue;
            }
            for &p in pages {
                if !self.pool.is_resident(p) && !self.pool.is_loading(p) {
                    out.push((p, meta.page_bytes[c]));
                }
            }
        }
        out
    }

    /// Free frames for `need` pages: orphans first, then whole chunks by
    /// keep relevance below `threshold` (any score when `None`).
    fn make_room(&mut self, need: usize, protect: &BTreeSet<usize>, threshold: Option<f64>) {
        if self.pool.free_frames() >= need {
            return;
        }
        let orphans: Vec<PageId> = self.state.orphans.iter().copied().collect();
        let n = self.pool.evict_pages(&mut self.state, &orphans).len();
        self.stats.orphan_evictions += n as u64;
        for (score, slot) in self.state.keep_candidates(protect) {
            if self.pool.free_frames() >= need {
                return;
            }
            if threshold.is_some_and(|t| score >= t) {
                break;
            }
            let pages = self.state.evictable_pages(slot, protect);
            let n = self.pool.evict_pages(&mut self.state, &pages).len() as u64;
            if threshold.is_some() {
                self.stats.keep_evictions += n;
            } else {
                self.stats.forced_evictions += n;
            }
        }
    }

    /// Hand cached chunks to blocked scans and start a chunk load for every
    /// starved scan that has room.
    pub fn schedule(&mut self, now: SimTime) -> Result<Schedule, AbmError> {
        let mut out = Schedule::default();
        let mut blocked: Vec<QueryRank> =
            self.state.cscans.iter().filter(|(_, s)| s.blocked).map(|(&id, s)| s.rank(id)).collect();
        blocked.sort();
        for rank in blocked {
            let scan = &self.state.cscans[&rank.id];
            if let Some(index) = scan.pick_available(&self.state.metas) {
                let d = self.deliver(rank.id, index)?;
                self.state.cscans.get_mut(&rank.id).expect("live").pending = Some(d);
                out.woken.push(rank.id);
            }
        }
        let mut skip = BTreeSet::new();
        while let Some((id, slot, score)) = self.pick_load(&skip) {
            skip.insert(id);
            let pages = self.pages_to_load(slot);
            let mut protect: BTreeSet<usize> = self.loading.keys().copied().collect();
            protect.insert(slot);
            self.make_room(pages.len(), &protect, Some(score));
            let busy = self.state.cscans.values().any(|s| s.current.is_some() || s.pending.is_some());
            let mut active = self.state.cscans.values().filter(|s| !s.needed.is_empty()).peekable();
            let waiting = active.peek().is_some() && active.all(|s| s.blocked);
            let progressing = busy || !out.woken.is_empty() || !self.inflight.is_empty();
            if self.pool.free_frames() < pages.len() && waiting && !progressing {
                self.make_room(pages.len(), &protect, None);
                if self.pool.free_frames() < pages.len() {
                    return Err(AbmError::Stalled {
                        pinned: self.pool.resident_count() - self.pool.unpinned_pages().len(),
                        needed: pages.len(),
                        free: self.pool.free_frames(),
                    });
                }
            }
            if self.pool.free_frames() < pages.len() {
                break;
            }
            for (p, bytes) in pages {
                if let Access::Miss { completes_at: Some(t), .. } =
                    self.pool.request_page(&mut self.state, p, bytes, now, None)?
                {
                    self.inflight.insert(p, slot);
                    *self.loading.entry(slot).or_default() += 1;
                    out.loads.push((p, t));
                }
            }
            self.stats.chunk_loads += 1;
        }
        Ok(out)
    }

    /// A page load issued by [`Abm::schedule`] finished.
    pub fn load_complete(&mut self, page: PageId, now: SimTime) -> Result<(), AbmError> {
        self.pool.complete_load(&mut self.state, page, now)?;
        if let Some(slot) = self.inflight.remove(&page) {
            let n = self.loading.get_mut(&slot).expect("loading slot");
            *n -= 1;
            if *n == 0 {
                self.loading.remove(&slot);
            }
        }
        Ok(())
    }

    pub fn loads_in_flight(&self) -> usize {
        self.inflight.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::DeltaEntry;
    use crate::storage::{ColumnDef, TableDef};

    fn table(tpp: u64, tuples: u64, chunk: u64) -> TableModel {
        TableModel::new(TableDef {
            table_id: 1,
            version: 0,
            tuple_count: tuples,
            columns: vec![ColumnDef::new(0, tpp)],
            chunk_size: chunk,
        })
        .unwrap()
    }

    fn ids(ps: &[PageId]) -> Vec<u64> {
        ps.iter().map(|p| p.index).collect()
    }

    fn snap(t: &TableModel, id: u64, pages: &[u64]) -> Arc<Snapshot> {
        let list = pages.iter().map(|&i| PageId::new(0, 0, i)).collect::<Vec<_>>();
        Arc::new(Snapshot::with_pages(id, t, pages.len() as u64 * 10, vec![list]))
    }

    fn abm(cap: usize) -> Abm {
        Abm::new(cap, 16, IoModel::new(655_360_000)).unwrap()
    }

    fn full(n: u64) -> Arc<DeltaList> {
        Arc::new(DeltaList::empty(n))
    }

    /// Run schedule and complete every issued load immediately.
    fn settle(a: &mut Abm) -> Vec<CScanId> {
        let mut woken = vec![];
        loop {
            let s = a.schedule(0).unwrap();
            woken.extend(s.woken);
            if s.loads.is_empty() {
                return woken;
            }
            for (p, _) in s.loads {
                a.load_complete(p, 0).unwrap();
            }
        }
    }

    #[test]
    fn snapshot_prefixes_from_appends() {
        let t = table(10, 40, 20);
        let mut a = abm(64);
        let s1 = snap(&t, 2, &[0, 1, 2, 3, 4, 5]);
        let s2 = snap(&t, 3, &[0, 1, 2, 3, 6, 7]);
        let r = [TupleRange::new(0, 60)];
        let (t1, case) = a.register_cscan(s1.clone(), &t, full(60), &[0], &r, false).unwrap();
        assert_eq!(case, RegistrationCase::NewTable);
        assert!(!a.chunk_shared(t1, 0).unwrap());
        let (t2, case) = a.register_cscan(s2.clone(), &t, full(60), &[0], &r, false).unwrap();
        assert_eq!(case, RegistrationCase::CommonPrefix);
        assert_eq!(ids(&a.shared_prefix(0)[0]), vec![0, 1, 2, 3]);
        assert!(a.chunk_shared(t1, 1).unwrap() && !a.chunk_shared(t1, 2).unwrap());
        a.unregister_cscan(t2).unwrap();
        let (_, case) = a.register_cscan(snap(&t, 4, &[0, 1, 2, 3, 6, 7]), &t, full(60), &[0], &r, false).unwrap();
        assert_eq!(case, RegistrationCase::CommonPrefix);
        let (_, case) = a.register_cscan(snap(&t, 5, &[0, 1, 2, 3, 6, 7]), &t, full(60), &[0], &r, false).unwrap();
        assert_eq!(case, RegistrationCase::IdenticalSnapshot);
        assert_eq!(ids(&a.shared_prefix(0)[0]), vec![0, 1, 2, 3, 6, 7]);
        assert!(!a.chunk_shared(t1, 2).unwrap());
    }

    #[test]
    fn appended_last_chunk_is_local() {
        let t = table(10, 40, 20);
        let mut a = abm(64);
        let base = snap(&t, 1, &[0, 1, 2, 3]);
        let appended = Arc::new(Snapshot::with_pages(2, &t, 41, vec![(0..5).map(|i| PageId::new(0, 0, i)).collect()]));
        let (x, _) = a.register_cscan(base, &t, full(40), &[0], &[TupleRange::new(0, 40)], false).unwrap();
        let (y, _) = a.register_cscan(appended, &t, full(41), &[0], &[TupleRange::new(0, 41)], false).unwrap();
        assert!(a.chunk_shared(x, 0).unwrap() && a.chunk_shared(x, 1).unwrap());
        assert!(a.chunk_shared(y, 0).unwrap() && !a.chunk_shared(y, 2).unwrap());
    }

    #[test]
    fn checkpointed_version_is_separate_and_destroyed() {
        let t0 = table(10, 40, 20);
        let t1 = TableModel::new(TableDef { version: 1, ..t0.def().clone() }).unwrap();
        let mut a = abm(64);
        let r = [TupleRange::new(0, 40)];
        let (old, _) = a.register_cscan(Arc::new(Snapshot::master(&t0, 1)), &t0, full(40), &[0], &r, false).unwrap();
        let (new, case) = a.register_cscan(Arc::new(Snapshot::master(&t1, 2)), &t1, full(40), &[0], &r, false).unwrap();
        assert_eq!(case, RegistrationCase::NewVersion);
        assert_eq!(a.live_versions(), vec![0, 1]);
        assert!(!a.chunk_shared(old, 0).unwrap());
        // drain the old scan, then let it leave
        settle(&mut a);
        while let ChunkRequest::Ready(_) = a.get_chunk(old).unwrap() {
            a.chunk_done(old, 0).unwrap();
            settle(&mut a);
        }
        a.unregister_cscan(old).unwrap();
        assert_eq!(a.live_versions(), vec![1]);
        assert_eq!(a.chunk_interest(new, 0).unwrap(), 1);
        assert!(matches!(a.unregister_cscan(old), Err(AbmError::UnknownCScan(_))));
    }

    #[test]
    fn one_load_wakes_every_interested_scan() {
        let t = table(10, 40, 20);
        let mut a = abm(64);
        let s = Arc::new(Snapshot::master(&t, 0));
        let (x, _) = a.register_cscan(s.clone(), &t, full(40), &[0], &[TupleRange::new(0, 20)], false).unwrap();
        let (y, _) = a.register_cscan(s, &t, full(40), &[0], &[TupleRange::new(0, 20)], false).unwrap();
        assert_eq!(a.get_chunk(x).unwrap(), ChunkRequest::Blocked);
        assert_eq!(a.get_chunk(y).unwrap(), ChunkRequest::Blocked);
        assert_eq!(settle(&mut a), vec![x, y]);
        assert_eq!(a.pool().stats().io_pages_loaded, 2);
        let ChunkRequest::Ready(dx) = a.get_chunk(x).unwrap() else { panic!() };
        assert_eq!(dx.rid_ranges, vec![TupleRange::new(0, 20)]);
        assert_eq!(a.pool().pin_count(PageId::new(0, 0, 0)), 2);
        a.chunk_done(x, 0).unwrap();
        assert_eq!(a.get_chunk(x).unwrap(), ChunkRequest::Done);
    }

    #[test]
    fn starved_scan_gets_the_load() {
        let t = table(10, 80, 10);
        let mut a = abm(64);
        let s = Arc::new(Snapshot::master(&t, 0));
        let (long, _) = a.register_cscan(s.clone(), &t, full(80), &[0], &[TupleRange::new(0, 20)], false).unwrap();
        settle(&mut a);
        // `long` now has cached chunks; a new short scan on other chunks is starved
        let (short, _) = a.register_cscan(s, &t, full(80), &[0], &[TupleRange::new(60, 80)], false).unwrap();
        assert!(a.query_rank(short).unwrap() < a.query_rank(long).unwrap());
        let sched = a.schedule(0).unwrap();
        assert_eq!(sched.loads.first().map(|(p, _)| p.index), Some(6));
    }

    #[test]
    fn relevance_tie_breaks() {
        let t = table(10, 80, 10);
        let mut a = abm(64);
        let s = Arc::new(Snapshot::master(&t, 0));
        let (x, _) = a.register_cscan(s.clone(), &t, full(80), &[0], &[TupleRange::new(0, 80)], false).unwrap();
        let (y, _) = a.register_cscan(s.clone(), &t, full(80), &[0], &[TupleRange::new(40, 80)], false).unwrap();
        assert_eq!(a.chunk_interest(x, 5).unwrap(), 2);
        assert_eq!(a.chunk_interest(x, 1).unwrap(), 1);
        // y has fewer chunks left; both starved; load goes to the chunk both want, lowest index
        assert!(a.query_rank(y).unwrap() < a.query_rank(x).unwrap());
        let sched = a.schedule(0).unwrap();
        assert_eq!(sched.loads.iter().map(|(p, _)| p.index).collect::<Vec<_>>(), vec![4]);
        // equal scans: lower id first
        let (z, _) = a.register_cscan(s, &t, full(80), &[0], &[TupleRange::new(40, 80)], false).unwrap();
        assert!(a.query_rank(y).unwrap() < a.query_rank(z).unwrap());
    }

    /// Take every chunk, settling whenever the scan blocks.
    fn drain(a: &mut Abm, id: CScanId) -> Vec<Delivery> {
        let mut out = vec![];
        loop {
            match a.get_chunk(id).unwrap() {
                ChunkRequest::Ready(d) => {
                    a.chunk_done(id, 0).unwrap();
                    out.push(d);
                }
                ChunkRequest::Blocked => {
                    settle(a);
                }
                ChunkRequest::Done => return out,
            }
        }
    }

    /// Leave the chunks of `range` cached by a scan that has come and gone.
    fn warm(a: &mut Abm, t: &TableModel, s: &Arc<Snapshot>, range: TupleRange) {
        let (w, _) = a.register_cscan(s.clone(), t, full(t.tuple_count()), &[0], &[range], false).unwrap();
        drain(a, w);
        a.unregister_cscan(w).unwrap();
    }

    #[test]
    fn loads_only_for_starved_scans() {
        let t = table(10, 40, 10);
        let mut a = abm(64);
        let s = Arc::new(Snapshot::master(&t, 0));
        let (x, _) = a.register_cscan(s.clone(), &t, full(40), &[0], &[TupleRange::new(0, 40)], false).unwrap();
        let (y, _) = a.register_cscan(s, &t, full(40), &[0], &[TupleRange::new(20, 40)], false).unwrap();
        let first = a.schedule(0).unwrap();
        // x and y each get one chunk; both want chunk 2 or 3, so x's pick serves y too
        assert_eq!(first.loads.iter().map(|(p, _)| p.index).collect::<Vec<_>>(), vec![2]);
        assert_eq!(a.loads_in_flight(), 1);
        assert!(settle(&mut a).is_empty());
        a.load_complete(first.loads[0].0, 0).unwrap();
        assert!(a.schedule(0).unwrap().loads.is_empty());
        assert!(a.is_available(x, 2).unwrap() && a.is_available(y, 2).unwrap());
        assert_eq!(a.pool().resident_count(), 1);
        let ChunkRequest::Ready(_) = a.get_chunk(x).unwrap() else { panic!() };
        let next = a.schedule(0).unwrap();
        assert_eq!(next.loads.len(), 1);
    }

    #[test]
    fn use_relevance_prefers_least_wanted_chunk() {
        let t = table(10, 40, 10);
        let mut a = abm(64);
        let s = Arc::new(Snapshot::master(&t, 0));
        warm(&mut a, &t, &s, TupleRange::new(0, 40));
        let (x, _) = a.register_cscan(s.clone(), &t, full(40), &[0], &[TupleRange::new(0, 40)], false).unwrap();
        let (_y, _) = a.register_cscan(s.clone(), &t, full(40), &[0], &[TupleRange::new(0, 20)], false).unwrap();
        let ChunkRequest::Ready(d) = a.get_chunk(x).unwrap() else { panic!() };
        assert_eq!(d.chunk.index, 2);
        a.chunk_done(x, 0).unwrap();
        // in-order scans take the lowest chunk regardless
        let (o, _) = a.register_cscan(s, &t, full(40), &[0], &[TupleRange::new(0, 40)], true).unwrap();
        let order: Vec<u64> = std::iter::from_fn(|| match a.get_chunk(o).unwrap() {
            ChunkRequest::Ready(d) => {
                a.chunk_done(o, 0).unwrap();
                Some(d.chunk.index)
            }
            _ => None,
        })
        .collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn keep_threshold_blocks_eviction() {
        let t = table(10, 40, 10);
        let mut a = abm(2);
        let s = Arc::new(Snapshot::master(&t, 0));
        warm(&mut a, &t, &s, TupleRange::new(0, 20));
        let (x, _) = a.register_cscan(s.clone(), &t, full(40), &[0], &[TupleRange::new(0, 40)], false).unwrap();
        let (y, _) = a.register_cscan(s.clone(), &t, full(40), &[0], &[TupleRange::new(0, 20)], false).unwrap();
        // two chunks cached, both wanted by both scans; pool is full
        assert_eq!(a.pool().resident_count(), 2);
        assert!(a.is_available(x, 0).unwrap() && a.is_available(x, 1).unwrap());
        assert!(a.schedule(0).unwrap().loads.is_empty());
        for index in [0, 1] {
            let ChunkRequest::Ready(d) = a.get_chunk(x).unwrap() else { panic!() };
            assert_eq!(d.chunk.index, index);
            if index == 0 {
                a.chunk_done(x, 0).unwrap();
            }
        }
        // x holds chunk 1 and is starved; chunk 0 still wanted by y keeps score 1,
        // not below the score 1 of loading chunk 2
        assert!(a.schedule(0).unwrap().loads.is_empty());
        let ChunkRequest::Ready(d) = a.get_chunk(y).unwrap() else { panic!() };
        assert_eq!(d.chunk.index, 0);
        a.chunk_done(y, 0).unwrap();
        let sched = a.schedule(0).unwrap();
        assert_eq!(sched.loads.iter().map(|(p, _)| p.index).collect::<Vec<_>>(), vec![2]);
        assert!(!a.pool().is_resident(PageId::new(0, 0, 0)));
        assert_eq!(a.stats().keep_evictions, 1);
    }

    #[test]
    fn deadlock_breaker_forces_eviction() {
        let t = table(10, 40, 10);
        let mut a = abm(1);
        let s = Arc::new(Snapshot::master(&t, 0));
        let (y, _) = a.register_cscan(s.clone(), &t, full(40), &[0], &[TupleRange::new(0, 20)], true).unwrap();
        let (x, _) = a.register_cscan(s, &t, full(40), &[0], &[TupleRange::new(10, 20)], false).unwrap();
        assert_eq!(a.get_chunk(y).unwrap(), ChunkRequest::Blocked);
        settle(&mut a);
        // x (one chunk left) got chunk 1 loaded; y must start at chunk 0
        assert!(a.is_available(x, 1).unwrap() && !a.is_available(y, 0).unwrap());
        let ChunkRequest::Ready(_) = a.get_chunk(x).unwrap() else { panic!() };
        a.chunk_done(x, 0).unwrap();
        assert_eq!(a.get_chunk(x).unwrap(), ChunkRequest::Done);
        a.unregister_cscan(x).unwrap();
        // chunk 1 still wanted by y and scores as high as chunk 0: only the breaker helps
        assert_eq!(settle(&mut a), vec![y]);
        assert_eq!(a.stats().forced_evictions, 1);
        let mut order = vec![];
        loop {
            match a.get_chunk(y).unwrap() {
                ChunkRequest::Ready(d) => {
                    order.push(d.chunk.index);
                    a.chunk_done(y, 0).unwrap();
                }
                ChunkRequest::Blocked => {
                    settle(&mut a);
                }
                ChunkRequest::Done => break,
            }
        }
        assert_eq!(order, vec![0, 1]);
    }

    #[test]
    fn deliveries_trim_overlapping_row_ranges() {
        // delete the last tuple of chunk 0: chunk 0's high end meets chunk 1's low end
        let t = table(5, 20, 10);
        let deltas = Arc::new(DeltaList::new(20, vec![DeltaEntry::delete(9), DeltaEntry::insert(10, 2)]).unwrap());
        let mut a = abm(16);
        let s = Arc::new(Snapshot::master(&t, 0));
        let visible = deltas.visible_count();
        let (x, _) = a.register_cscan(s, &t, deltas, &[0], &[TupleRange::new(0, visible)], false).unwrap();
        let mut ranges: Vec<TupleRange> = drain(&mut a, x).into_iter().flat_map(|d| d.rid_ranges).collect();
        ranges.sort();
        let covered: Vec<u64> = ranges.iter().flat_map(|r| r.begin..r.end).collect();
        assert_eq!(covered, (0..visible).collect::<Vec<_>>());
        a.unregister_cscan(x).unwrap();
    }

    #[test]
    fn orphans_evicted_first() {
        let t = table(10, 40, 10);
        let mut a = abm(2);
        let s = Arc::new(Snapshot::master(&t, 0));
        let (x, _) = a.register_cscan(s.clone(), &t, full(40), &[0], &[TupleRange::new(0, 10)], false).unwrap();
        settle(&mut a);
        let ChunkRequest::Ready(_) = a.get_chunk(x).unwrap() else { panic!() };
        a.chunk_done(x, 0).unwrap();
        assert_eq!(a.get_chunk(x).unwrap(), ChunkRequest::Done);
        a.unregister_cscan(x).unwrap();
        assert!(a.live_versions().is_empty());
        let (y, _) = a.register_cscan(s, &t, full(40), &[0], &[TupleRange::new(30, 40)], false).unwrap();
        settle(&mut a);
        assert!(a.is_available(y, 3).unwrap());
        assert_eq!(a.stats().orphan_evictions, 0);
        assert_eq!(a.pool().resident_count(), 2);
    }
}
