//! Least-recently-used replacement over unpinned pages.
//!
//! Recency is the later of the last access and the last unpin; pinned pages
//! are off the list entirely.

use crate::list::{ListHead, NodeArena, NodeRef, TouchStats};
use crate::policy::{ReplacementPolicy, ScanAware, ScanError, ScanId};
use crate::storage::{ColumnId, PageId, TableModel, TupleRange};
use crate::{FastMap, SimTime};

#[derive(Debug, Default)]
pub struct Lru {
    arena: NodeArena<PageId>,
    list: ListHead,
    nodes: FastMap<PageId, NodeRef>,
    next_scan: ScanId,
}

impl Lru {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn contains(&self, page: PageId) -> bool {
        self.nodes.contains_key(&page)
    }

    pub fn touch_stats(&self) -> TouchStats {
        self.arena.stats()
    }

    /// Pages from least to most recently used.
    pub fn order(&self) -> Vec<PageId> {
        self.arena.iter_back(&self.list).collect()
    }

    fn push(&mut self, page: PageId) {
        let node = self.arena.push_front(&mut self.list, page);
        self.nodes.insert(page, node);
    }

    fn take(&mut self, page: PageId) -> bool {
        match self.nodes.remove(&page) {
            Some(node) => {
                self.arena.remove(&mut self.list, node);
                true
            }
            None => false,
        }
    }
}

impl ReplacementPolicy for Lru {
    fn on_access(&mut self, page: PageId, _now: SimTime) {
        if self.take(page) {
            self.push(page);
        }
    }

    fn on_loaded(&mut self, page: PageId, _now: SimTime) {
        self.take(page);
        self.push(page);
    }

    fn on_pinned(&mut self, page: PageId, _now: SimTime) {
        self.take(page);
    }

    fn on_unpinned(&mut self, page: PageId, _now: SimTime) {
        self.take(page);
        self.push(page);
    }

    fn select_victims(&mut self, k: usize, _now: SimTime) -> Vec<PageId> {
        self.arena.iter_back(&self.list).take(k).collect()
    }

    fn on_evicted(&mut self, page: PageId) {
        self.take(page);
    }
}

impl ScanAware for Lru {
    fn register_scan(
        &mut self,
        _: &TableModel,
        _: &[ColumnId],
        _: &[TupleRange],
        _: SimTime,
    ) -> Result<ScanId, ScanError> {
        self.next_scan += 1;
        Ok(self.next_scan)
    }

    fn report_scan_position(&mut self, _: ScanId, _: ColumnId, _: u64, _: SimTime) -> Result<(), ScanError> {
        Ok(())
    }

    fn page_consumed(&mut self, _: ScanId, _: PageId) {}

    fn unregister_scan(&mut self, _: ScanId, _: SimTime) -> Result<(), ScanError> {
        Ok(())
    }
}
