//! Callback contracts between the buffer pool, eviction policies and scans.

use crate::storage::{ColumnId, PageId, TableModel, TupleRange};
use crate::SimTime;

pub type ScanId = u64;

/// Eviction policy as seen by the buffer pool. Callbacks run while the caller
/// holds exclusive access to the pool.
///
/// Pages enter the policy on `on_loaded`, leave it while pinned
/// (`on_pinned` / `on_unpinned`) and leave for good on `on_evicted`, so a
/// policy only ever tracks evictable pages. The pool still re-checks pins on
/// every nomination.
pub trait ReplacementPolicy {
    fn on_access(&mut self, page: PageId, now: SimTime);
    fn on_loaded(&mut self, page: PageId, now: SimTime);
    fn on_pinned(&mut self, _page: PageId, _now: SimTime) {}
    fn on_unpinned(&mut self, _page: PageId, _now: SimTime) {}
    /// Up to `k` eviction candidates, best victim first. Must not mutate
    /// the policy's view of residency; `on_evicted` follows for each page
    /// actually evicted.
    fn select_victims(&mut self, k: usize, now: SimTime) -> Vec<PageId>;
    fn on_evicted(&mut self, page: PageId);
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScanError {
    #[error("unknown scan {0}")]
    UnknownScan(ScanId),
    #[error("scan {scan} reported position {reported} behind {current}")]
    PositionRegressed { scan: ScanId, reported: u64, current: u64 },
    #[error("scan {scan} does not read column {column}")]
    UnknownColumn { scan: ScanId, column: ColumnId },
    #[error(transparent)]
    Storage(#[from] crate::storage::StorageError),
}

/// Progress hooks for order-preserving scans. Policies that do not predict
/// (LRU) accept and ignore them.
pub trait ScanAware {
    fn register_scan(
        &mut self,
        table: &TableModel,
        columns: &[ColumnId],
        ranges: &[TupleRange],
        now: SimTime,
    ) -> Result<ScanId, ScanError>;

    fn report_scan_position(
        &mut self,
        scan: ScanId,
        column: ColumnId,
        tuples_consumed: u64,
        now: SimTime,
    ) -> Result<(), ScanError>;

    /// The scan finished reading `page` and will not come back to it.
    fn page_consumed(&mut self, scan: ScanId, page: PageId);

    fn unregister_scan(&mut self, scan: ScanId, now: SimTime) -> Result<(), ScanError>;

    /// Periodic clock tick, once per time slice.
    fn tick(&mut self, _now: SimTime) {}

    /// Whether `tick` does anything; lets the simulator skip idle timers.
    fn wants_ticks(&self) -> bool {
        false
    }
}
