//! Columnar table layout: columns split into fixed-tuple-count pages, tables
//! split into fixed-size chunks that are logical tuple ranges.
//!
//! A chunk is never a set of pages. Its tuple range is translated into pages
//! separately for every column involved, so one page may belong to several
//! adjacent chunks when a column packs more tuples per page than a chunk holds.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub type TableId = u32;
pub type ColumnId = u32;
pub type TableVersion = u32;

pub const DEFAULT_CHUNK_SIZE: u64 = 100_000;
pub const DEFAULT_PAGE_SIZE_BYTES: u64 = 65_536;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StorageError {
    #[error("tuple range [{begin}, {end}) outside table of {tuple_count} tuples")]
    RangeOutOfBounds { begin: u64, end: u64, tuple_count: u64 },
    #[error("stable position {sid} outside table of {tuple_count} tuples")]
    SidOutOfBounds { sid: u64, tuple_count: u64 },
    #[error("chunk {chunk} outside table of {chunk_count} chunks")]
    ChunkOutOfBounds { chunk: u64, chunk_count: u64 },
    #[error("unknown column {0}")]
    UnknownColumn(ColumnId),
    #[error("invalid table definition: {0}")]
    InvalidTable(String),
}

/// Half-open tuple interval `[begin, end)`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TupleRange {
    pub begin: u64,
    pub end: u64,
}

impl TupleRange {
    pub fn new(begin: u64, end: u64) -> Self {
        debug_assert!(begin <= end, "inverted range [{begin}, {end})");
        Self { begin, end }
    }

    pub fn len(&self) -> u64 {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.begin >= self.end
    }

    pub fn contains(&self, pos: u64) -> bool {
        self.begin <= pos && pos < self.end
    }

    pub fn intersect(&self, other: &TupleRange) -> Option<TupleRange> {
        let begin = self.begin.max(other.begin);
        let end = self.end.min(other.end);
        (begin < end).then_some(TupleRange { begin, end })
    }
}

impl fmt::Display for TupleRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.begin, self.end)
    }
}

/// Physical page identity. Pages of different table versions never compare
/// equal, which keeps checkpointed images from sharing buffer frames.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageId {
    pub table_version: TableVersion,
    pub column: ColumnId,
    pub index: u64,
}

impl PageId {
    pub fn new(table_version: TableVersion, column: ColumnId, index: u64) -> Self {
        Self { table_version, column, index }
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}:c{}:p{}", self.table_version, self.column, self.index)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkId {
    pub table_version: TableVersion,
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnDef {
    pub column_id: ColumnId,
    pub tuples_per_page: u64,
    pub page_size_bytes: u64,
}

impl ColumnDef {
    pub fn new(column_id: ColumnId, tuples_per_page: u64) -> Self {
        Self { column_id, tuples_per_page, page_size_bytes: DEFAULT_PAGE_SIZE_BYTES }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableDef {
    pub table_id: TableId,
    pub version: TableVersion,
    pub tuple_count: u64,
    pub columns: Vec<ColumnDef>,
    pub chunk_size: u64,
}

/// Validated, immutable table layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableModel {
    def: TableDef,
}

impl TableModel {
    pub fn new(def: TableDef) -> Result<Self, StorageError> {
        if def.chunk_size == 0 {
            return Err(StorageError::InvalidTable("chunk_size must be at least 1".into()));
        }
        if def.columns.is_empty() {
            return Err(StorageError::InvalidTable("table has no columns".into()));
        }
        let mut seen = BTreeSet::new();
        for col in &def.columns {
            if col.tuples_per_page == 0 {
                return Err(StorageError::InvalidTable(format!("column {} has zero tuples per page", col.column_id)));
            }
            if !seen.insert(col.column_id) {
                return Err(StorageError::InvalidTable(format!("duplicate column id {}", col.column_id)));
            }
        }
        Ok(Self { def })
    }

    pub fn def(&self) -> &TableDef {
        &self.def
    }

    pub fn table_id(&self) -> TableId {
        self.def.table_id
    }

    pub fn version(&self) -> TableVersion {
        self.def.version
    }

    pub fn tuple_count(&self) -> u64 {
        self.def.tuple_count
    }

    pub fn chunk_size(&self) -> u64 {
        self.def.chunk_size
    }

    pub fn columns(&self) -> &[ColumnDef] {
        &self.def.columns
    }

    pub fn column_ids(&self) -> Vec<ColumnId> {
        self.def.columns.iter().map(|c| c.column_id).collect()
    }

    pub fn column(&self, column: ColumnId) -> Result<&ColumnDef, StorageError> {
        self.def.columns.iter().find(|c| c.column_id == column).ok_or(StorageError::UnknownColumn(column))
    }

    pub fn chunk_count(&self) -> u64 {
        self.def.tuple_count.div_ceil(self.def.chunk_size)
    }

    pub fn page_count(&self, column: ColumnId) -> Result<u64, StorageError> {
        let col = self.column(column)?;
        Ok(self.def.tuple_count.div_ceil(col.tuples_per_page))
    }

    /// Tuple span covered by page `index` of `column`.
    pub fn page_span(&self, column: ColumnId, index: u64) -> Result<TupleRange, StorageError> {
        let tpp = self.column(column)?.tuples_per_page;
        let begin = index * tpp;
        Ok(TupleRange::new(begin.min(self.def.tuple_count), ((index + 1) * tpp).min(self.def.tuple_count)))
    }

    pub fn chunk_range(&self, chunk: u64) -> Result<TupleRange, StorageError> {
        let chunk_count = self.chunk_count();
        if chunk >= chunk_count {
            return Err(StorageError::ChunkOutOfBounds { chunk, chunk_count });
        }
        let begin = chunk * self.def.chunk_size;
        Ok(TupleRange::new(begin, (begin + self.def.chunk_size).min(self.def.tuple_count)))
    }

    fn check_range(&self, range: TupleRange) -> Result<(), StorageError> {
        if range.begin > range.end || range.end > self.def.tuple_count {
            return Err(StorageError::RangeOutOfBounds {
                begin: range.begin,
                end: range.end,
                tuple_count: self.def.tuple_count,
            });
        }
        Ok(())
    }

    /// Pages of `column` whose tuple span intersects `range`, ascending.
    pub fn pages_for_range(&self, column: ColumnId, range: TupleRange) -> Result<Vec<PageId>, StorageError> {
        self.check_range(range)?;
        let tpp = self.column(column)?.tuples_per_page;
        if range.is_empty() {
            return Ok(Vec::new());
        }
        let first = range.begin / tpp;
        let last = (range.end - 1) / tpp;
        Ok((first..=last).map(|i| PageId::new(self.def.version, column, i)).collect())
    }

    /// Union of the pages of every listed column overlapping the chunk's tuples.
    pub fn chunk_pages(&self, chunk: ChunkId, columns: &[ColumnId]) -> Result<BTreeSet<PageId>, StorageError> {
        let range = self.chunk_range(chunk.index)?;
        let mut pages = BTreeSet::new();
        for &col in columns {
            pages.extend(self.pages_for_range(col, range)?);
        }
        Ok(pages)
    }

    pub fn chunk_of_sid(&self, sid: u64) -> Result<ChunkId, StorageError> {
        if sid >= self.def.tuple_count {
            return Err(StorageError::SidOutOfBounds { sid, tuple_count: self.def.tuple_count });
        }
        Ok(ChunkId { table_version: self.def.version, index: sid / self.def.chunk_size })
    }

    /// Chunk indexes overlapped by a stable-position range.
    pub fn chunks_for_range(&self, range: TupleRange) -> Result<std::ops::Range<u64>, StorageError> {
        self.check_range(range)?;
        if range.is_empty() {
            return Ok(0..0);
        }
        Ok(range.begin / self.def.chunk_size..(range.end - 1) / self.def.chunk_size + 1)
    }

    pub fn bytes_per_page(&self, column: ColumnId) -> Result<u64, StorageError> {
        Ok(self.column(column)?.page_size_bytes)
    }
}

pub type SnapshotId = u64;

/// Storage-level snapshot: per-column ordered page lists. Snapshots created by
/// appends to the same base share a prefix; a checkpointed image uses a fresh
/// table version and shares nothing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub snapshot_id: SnapshotId,
    pub table_id: TableId,
    pub version: TableVersion,
    pub tuple_count: u64,
    pub pages_per_column: Vec<Vec<PageId>>,
    pub is_master: bool,
}

impl Snapshot {
    /// Identity layout of a table: position `i` of each column is page `i`.
    pub fn master(table: &TableModel, snapshot_id: SnapshotId) -> Self {
        let pages_per_column = table
            .columns()
            .iter()
            .map(|c| {
                let n = table.tuple_count().div_ceil(c.tuples_per_page);
                (0..n).map(|i| PageId::new(table.version(), c.column_id, i)).collect()
            })
            .collect();
        Self {
            snapshot_id,
            table_id: table.table_id(),
            version: table.version(),
            tuple_count: table.tuple_count(),
            pages_per_column,
            is_master: true,
        }
    }

    /// Snapshot with explicit page lists, e.g. after an append.
    pub fn with_pages(
        snapshot_id: SnapshotId,
        table: &TableModel,
        tuple_count: u64,
        pages_per_column: Vec<Vec<PageId>>,
    ) -> Self {
        Self {
            snapshot_id,
            table_id: table.table_id(),
            version: table.version(),
            tuple_count,
            pages_per_column,
            is_master: false,
        }
    }

    pub fn chunk_count(&self, chunk_size: u64) -> u64 {
        self.tuple_count.div_ceil(chunk_size)
    }

    fn column_pos(&self, table: &TableModel, column: ColumnId) -> Result<usize, StorageError> {
        table
            .columns()
            .iter()
            .position(|c| c.column_id == column)
            .filter(|&p| p < self.pages_per_column.len())
            .ok_or(StorageError::UnknownColumn(column))
    }

    /// Positional page indexes of `column` covering `range` in this snapshot.
    pub fn page_positions(
        &self,
        table: &TableModel,
        column: ColumnId,
        range: TupleRange,
    ) -> Result<std::ops::Range<usize>, StorageError> {
        if range.begin > range.end || range.end > self.tuple_count {
            return Err(StorageError::RangeOutOfBounds {
                begin: range.begin,
                end: range.end,
                tuple_count: self.tuple_count,
            });
        }
        if range.is_empty() {
            return Ok(0..0);
        }
        let tpp = table.column(column)?.tuples_per_page;
        Ok((range.begin / tpp) as usize..((range.end - 1) / tpp) as usize + 1)
    }

    /// Physical pages of `column` covering `range`.
    pub fn resolve(
        &self,
        table: &TableModel,
        column: ColumnId,
        range: TupleRange,
    ) -> Result<Vec<PageId>, StorageError> {
        let pos = self.column_pos(table, column)?;
        let list = &self.pages_per_column[pos];
        let positions = self.page_positions(table, column, range)?;
        if positions.end > list.len() {
            return Err(StorageError::InvalidTable(format!(
                "snapshot {} lists {} pages for column {}, range {} needs {}",
                self.snapshot_id,
                list.len(),
                column,
                range,
                positions.end
            )));
        }
        Ok(list[positions].to_vec())
    }

    /// Physical pages of chunk `chunk` for the listed columns.
    pub fn chunk_pages(
        &self,
        table: &TableModel,
        chunk: u64,
        columns: &[ColumnId],
    ) -> Result<Vec<PageId>, StorageError> {
        let cs = table.chunk_size();
        let chunk_count = self.chunk_count(cs);
        if chunk >= chunk_count {
            return Err(StorageError::ChunkOutOfBounds { chunk, chunk_count });
        }
        let range = TupleRange::new(chunk * cs, ((chunk + 1) * cs).min(self.tuple_count));
        let mut out = Vec::new();
        for &col in columns {
            out.extend(self.resolve(table, col, range)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(tpps: &[u64], tuples: u64, chunk: u64) -> TableModel {
        TableModel::new(TableDef {
            table_id: 1,
            version: 0,
            tuple_count: tuples,
            columns: tpps.iter().enumerate().map(|(i, &t)| ColumnDef::new(i as u32, t)).collect(),
            chunk_size: chunk,
        })
        .unwrap()
    }

    /// Enumerate every tuple of the range and collect the page it lives on.
    fn oracle_pages(tpp: u64, range: TupleRange) -> Vec<u64> {
        let mut pages: Vec<u64> = (range.begin..range.end).map(|t| t / tpp).collect();
        pages.dedup();
        pages
    }

    fn idx(pages: &[PageId]) -> Vec<u64> {
        pages.iter().map(|p| p.index).collect()
    }

    #[test]
    fn pages_for_range_examples() {
        let t = table(&[100], 1000, 100);
        assert_eq!(idx(&t.pages_for_range(0, TupleRange::new(0, 100)).unwrap()), vec![0]);
        let r = TupleRange::new(150, 250);
        assert_eq!(idx(&t.pages_for_range(0, r).unwrap()), oracle_pages(100, r));
        assert_eq!(idx(&t.pages_for_range(0, r).unwrap()), vec![1, 2]);
        assert!(t.pages_for_range(0, TupleRange::new(50, 50)).unwrap().is_empty());
    }

    #[test]
    fn pages_for_range_rejects_out_of_bounds() {
        let t = table(&[100], 1000, 100);
        assert!(matches!(t.pages_for_range(0, TupleRange::new(900, 1001)), Err(StorageError::RangeOutOfBounds { .. })));
        assert_eq!(t.pages_for_range(7, TupleRange::new(0, 1)), Err(StorageError::UnknownColumn(7)));
    }

    #[test]
    fn chunk_pages_examples() {
        let aligned = table(&[100], 1000, 100);
        let c2 = ChunkId { table_version: 0, index: 2 };
        assert_eq!(idx(&aligned.chunk_pages(c2, &[0]).unwrap().into_iter().collect::<Vec<_>>()), vec![2]);

        let wide = table(&[150], 1000, 100);
        let c1 = ChunkId { table_version: 0, index: 1 };
        let got = idx(&wide.chunk_pages(c1, &[0]).unwrap().into_iter().collect::<Vec<_>>());
        assert_eq!(got, oracle_pages(150, TupleRange::new(100, 200)));
        assert_eq!(got, vec![0, 1]);

        let two = table(&[100, 50], 1000, 100);
        assert_eq!(two.chunk_pages(c1, &[0, 1]).unwrap().len(), 3);
        assert_eq!(two.chunk_pages(c1, &[0, 9]), Err(StorageError::UnknownColumn(9)));
    }

    #[test]
    fn chunk_of_sid_boundaries() {
        let t = table(&[100], 1000, 100);
        assert_eq!(t.chunk_of_sid(0).unwrap().index, 0);
        assert_eq!(t.chunk_of_sid(199).unwrap().index, 1);
        assert_eq!(t.chunk_of_sid(200).unwrap().index, 2);
        assert!(t.chunk_of_sid(1000).is_err());
    }

    #[test]
    fn invalid_tables_rejected() {
        let mut def = table(&[100], 10, 5).def().clone();
        def.chunk_size = 0;
        assert!(TableModel::new(def.clone()).is_err());
        def.chunk_size = 5;
        def.columns[0].tuples_per_page = 0;
        assert!(TableModel::new(def).is_err());
    }

    #[test]
    fn snapshot_resolves_appended_pages() {
        let t = table(&[100], 400, 100);
        let master = Snapshot::master(&t, 1);
        let mut pages = master.pages_per_column[0].clone();
        pages.extend([PageId::new(0, 0, 6), PageId::new(0, 0, 7)]);
        let appended = Snapshot::with_pages(2, &t, 600, vec![pages]);
        assert_eq!(idx(&appended.chunk_pages(&t, 4, &[0]).unwrap()), vec![6]);
        assert_eq!(idx(&appended.chunk_pages(&t, 1, &[0]).unwrap()), vec![1]);
        assert!(master.chunk_pages(&t, 4, &[0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_union_is_full_page_list(
                tpp in 1u64..300, n in 1u64..3000, cuts in proptest::collection::vec(0u64..3000, 0..6)
            ) {
                let t = table(&[tpp], n, 97);
                let mut bounds: Vec<u64> = cuts.into_iter().map(|c| c % (n + 1)).collect();
                bounds.push(0);
                bounds.push(n);
                bounds.sort_unstable();
                bounds.dedup();
                let mut all = Vec::new();
                for w in bounds.windows(2) {
                    let pages = t.pages_for_range(0, TupleRange::new(w[0], w[1])).unwrap();
                    prop_assert_eq!(idx(&pages), oracle_pages(tpp, TupleRange::new(w[0], w[1])));
                    all.extend(idx(&pages));
                }
                let full: Vec<u64> = (0..t.page_count(0).unwrap()).collect();
                let mut dedup = all.clone();
                dedup.dedup();
                prop_assert_eq!(dedup, full);
                // duplicates only where a partition boundary cuts through a page
                let dupes = all.len() as u64 - t.page_count(0).unwrap();
                let inner_cuts = bounds.iter().filter(|&&b| b != 0 && b != n && b % tpp != 0).count() as u64;
                prop_assert!(dupes <= inner_cuts);
            }

            #[test]
            fn chunk_of_sid_monotone(cs in 1u64..500, a in 0u64..5000, b in 0u64..5000) {
                let t = table(&[10], 5000, cs);
                let (lo, hi) = (a.min(b), a.max(b));
                prop_assert!(t.chunk_of_sid(lo).unwrap().index <= t.chunk_of_sid(hi).unwrap().index);
            }

            #[test]
            fn only_adjacent_chunks_share_pages(cs in 1u64..200, tpp_frac in 1u64..=100, n in 1u64..4000) {
                let tpp = (cs * tpp_frac / 100).max(1);
                let t = table(&[tpp], n, cs);
                for c in 0..t.chunk_count().saturating_sub(2) {
                    let a = t.chunk_pages(ChunkId { table_version: 0, index: c }, &[0]).unwrap();
                    let b = t.chunk_pages(ChunkId { table_version: 0, index: c + 2 }, &[0]).unwrap();
                    prop_assert!(a.is_disjoint(&b));
                }
            }
        }
    }
}
