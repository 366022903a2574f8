//! Positional deltas over stable storage and the SID/RID translations that
//! out-of-order chunk delivery depends on.
//!
//! The merged (visible) stream is produced by walking stable positions in
//! order; for each stable position `s` the inserts keyed at `s` come first,
//! then the stable tuple itself unless it is deleted. Inserts keyed at
//! `stable_count` trail the table.

use std::cmp::Ordering;

use thiserror::Error;

use crate::storage::TupleRange;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DeltaError {
    #[error("visible position {rid} outside {visible} visible tuples")]
    RidOutOfBounds { rid: u64, visible: u64 },
    #[error("stable position {sid} outside {stable} stable tuples")]
    SidOutOfBounds { sid: u64, stable: u64 },
    #[error("malformed delta list: {0}")]
    Malformed(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DeltaKind {
    Insert(u64),
    Delete,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct DeltaEntry {
    pub sid: u64,
    pub kind: DeltaKind,
}

impl DeltaEntry {
    pub fn insert(sid: u64, count: u64) -> Self {
        Self { sid, kind: DeltaKind::Insert(count) }
    }

    pub fn delete(sid: u64) -> Self {
        Self { sid, kind: DeltaKind::Delete }
    }
}

/// Net effect of all entries at one stable position.
#[derive(Copy, Clone, Debug)]
struct SidDelta {
    sid: u64,
    inserts: u64,
    deleted: bool,
}

/// Sorted positional delta list. Running deltas are kept as a prefix sum so
/// every translation is a binary search.
#[derive(Clone, Debug)]
pub struct DeltaList {
    stable_count: u64,
    entries: Vec<DeltaEntry>,
    merged: Vec<SidDelta>,
    /// `net_before[i]` = visible minus stable tuple count contributed by `merged[..i]`.
    net_before: Vec<i64>,
}

impl DeltaList {
    pub fn empty(stable_count: u64) -> Self {
        Self { stable_count, entries: Vec::new(), merged: Vec::new(), net_before: vec![0] }
    }

    pub fn new(stable_count: u64, mut entries: Vec<DeltaEntry>) -> Result<Self, DeltaError> {
        entries.sort_by(|a, b| {
            a.sid.cmp(&b.sid).then_with(|| match (a.kind, b.kind) {
                (DeltaKind::Insert(_), DeltaKind::Delete) => Ordering::Less,
                (DeltaKind::Delete, DeltaKind::Insert(_)) => Ordering::Greater,
                _ => Ordering::Equal,
            })
        });
        let mut merged: Vec<SidDelta> = Vec::new();
        for e in &entries {
            if e.sid > stable_count {
                return Err(DeltaError::Malformed(format!("entry at sid {} past end {}", e.sid, stable_count)));
            }
            if merged.last().is_none_or(|m| m.sid != e.sid) {
                merged.push(SidDelta { sid: e.sid, inserts: 0, deleted: false });
            }
            let m = merged.last_mut().expect("just pushed");
            match e.kind {
                DeltaKind::Insert(0) => return Err(DeltaError::Malformed(format!("empty insert at sid {}", e.sid))),
                DeltaKind::Insert(n) => m.inserts += n,
                DeltaKind::Delete => {
                    if e.sid == stable_count {
                        return Err(DeltaError::Malformed("delete past last stable tuple".into()));
                    }
                    if m.deleted {
                        return Err(DeltaError::Malformed(format!("duplicate delete at sid {}", e.sid)));
                    }
                    m.deleted = true;
                }
            }
        }
        let mut net_before = Vec::with_capacity(merged.len() + 1);
        let mut acc = 0i64;
        net_before.push(0);
        for m in &merged {
            acc += m.inserts as i64 - i64::from(m.deleted);
            net_before.push(acc);
        }
        Ok(Self { stable_count, entries, merged, net_before })
    }

    pub fn entries(&self) -> &[DeltaEntry] {
        &self.entries
    }

    pub fn stable_count(&self) -> u64 {
        self.stable_count
    }

    pub fn visible_count(&self) -> u64 {
        (self.stable_count as i64 + self.net_before[self.merged.len()]) as u64
    }

    /// First visible position produced at or after stable position `sid`.
    fn rid_start(&self, sid: u64) -> u64 {
        let before = self.merged.partition_point(|m| m.sid < sid);
        (sid as i64 + self.net_before[before]) as u64
    }

    /// Inserts keyed at `sid` and whether the stable tuple survives.
    fn at(&self, sid: u64) -> (u64, bool) {
        match self.merged.binary_search_by_key(&sid, |m| m.sid) {
            Ok(i) => (self.merged[i].inserts, !self.merged[i].deleted && sid < self.stable_count),
            Err(_) => (0, sid < self.stable_count),
        }
    }

    /// Stable position of a visible tuple. Inserted tuples map to the stable
    /// tuple that follows them (or `stable_count` when trailing).
    pub fn rid_to_sid(&self, rid: u64) -> Result<u64, DeltaError> {
        let visible = self.visible_count();
        if rid >= visible {
            return Err(DeltaError::RidOutOfBounds { rid, visible });
        }
        if self.merged.is_empty() {
            return Ok(rid);
        }
        // largest sid with rid_start(sid) <= rid
        let (mut lo, mut hi) = (0u64, self.stable_count);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if self.rid_start(mid) <= rid {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        Ok(lo)
    }

    fn check_sid(&self, sid: u64) -> Result<(), DeltaError> {
        if sid > self.stable_count {
            return Err(DeltaError::SidOutOfBounds { sid, stable: self.stable_count });
        }
        Ok(())
    }

    /// Lowest visible position mapping to `sid`; for a deleted tuple, the
    /// first visible position mapping to a higher stable position.
    pub fn sid_to_rid_low(&self, sid: u64) -> Result<u64, DeltaError> {
        self.check_sid(sid)?;
        Ok(self.rid_start(sid))
    }

    /// Highest visible position mapping to `sid`. A deleted tuple with no
    /// inserts in front of it translates like the low variant.
    pub fn sid_to_rid_high(&self, sid: u64) -> Result<u64, DeltaError> {
        self.check_sid(sid)?;
        let start = self.rid_start(sid);
        let (inserts, live) = self.at(sid);
        let produced = inserts + u64::from(live);
        Ok(if produced == 0 { start } else { start + produced - 1 })
    }

    /// Widest visible range a chunk's stable tuples (plus attached inserts)
    /// can produce. Neighbouring chunks may overlap by a tuple when a chunk
    /// ends on a deleted position.
    pub fn chunk_to_rid_range(&self, sid_range: TupleRange) -> Result<TupleRange, DeltaError> {
        self.check_sid(sid_range.end)?;
        if sid_range.is_empty() {
            let at = self.sid_to_rid_low(sid_range.begin)?;
            return Ok(TupleRange::new(at, at));
        }
        let begin = self.sid_to_rid_low(sid_range.begin)?;
        let end = if sid_range.end == self.stable_count {
            self.visible_count()
        } else {
            (self.sid_to_rid_high(sid_range.end - 1)? + 1).min(self.visible_count())
        };
        Ok(TupleRange::new(begin, end.max(begin)))
    }

    /// Stable range a visible range reads from.
    pub fn rid_range_to_sid_range(&self, rid_range: TupleRange) -> Result<TupleRange, DeltaError> {
        if rid_range.is_empty() {
            let s = if rid_range.begin >= self.visible_count() {
                self.stable_count
            } else {
                self.rid_to_sid(rid_range.begin)?
            };
            return Ok(TupleRange::new(s, s));
        }
        let begin = self.rid_to_sid(rid_range.begin)?;
        let end = (self.rid_to_sid(rid_range.end - 1)? + 1).min(self.stable_count);
        // trailing inserts map to stable_count and read the last stable chunk
        let begin = begin.min(self.stable_count.saturating_sub(1));
        Ok(TupleRange::new(begin, end.max(begin + 1).min(self.stable_count.max(1))))
    }
}

/// Visible ranges a scan has already produced: sorted, disjoint, coalesced.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProcessedSet {
    ranges: Vec<TupleRange>,
}

impl ProcessedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ranges(&self) -> &[TupleRange] {
        &self.ranges
    }

    pub fn total(&self) -> u64 {
        self.ranges.iter().map(TupleRange::len).sum()
    }

    /// Returns `candidate` minus everything processed so far and records
    /// `candidate` as processed.
    pub fn trim_delivered(&mut self, candidate: TupleRange) -> Vec<TupleRange> {
        if candidate.is_empty() {
            return Vec::new();
        }
        let mut fresh = Vec::new();
        let mut cursor = candidate.begin;
        let first = self.ranges.partition_point(|r| r.end <= candidate.begin);
        for r in &self.ranges[first..] {
            if r.begin >= candidate.end {
                break;
            }
            if r.begin > cursor {
                fresh.push(TupleRange::new(cursor, r.begin));
            }
            cursor = cursor.max(r.end);
        }
        if cursor < candidate.end {
            fresh.push(TupleRange::new(cursor, candidate.end));
        }
        self.insert(candidate);
        fresh
    }

    fn insert(&mut self, range: TupleRange) {
        let lo = self.ranges.partition_point(|r| r.end < range.begin);
        let hi = self.ranges.partition_point(|r| r.begin <= range.end);
        let mut merged = range;
        for r in &self.ranges[lo..hi] {
            merged.begin = merged.begin.min(r.begin);
            merged.end = merged.end.max(r.end);
        }
        self.ranges.splice(lo..hi, std::iter::once(merged));
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force materialization of the merged stream.

    use super::*;

    /// `stream[rid]` = sid that rid translates to.
    pub fn merged_stream(stable: u64, entries: &[DeltaEntry]) -> Vec<u64> {
        let mut stream = Vec::new();
        for s in 0..=stable {
            let inserts: u64 = entries
                .iter()
                .filter(|e| e.sid == s)
                .map(|e| if let DeltaKind::Insert(n) = e.kind { n } else { 0 })
                .sum();
            stream.extend(std::iter::repeat_n(s, inserts as usize));
            let deleted = entries.iter().any(|e| e.sid == s && e.kind == DeltaKind::Delete);
            if s < stable && !deleted {
                stream.push(s);
            }
        }
        stream
    }

    pub fn low(stream: &[u64], sid: u64) -> u64 {
        stream.iter().position(|&s| s >= sid).unwrap_or(stream.len()) as u64
    }

    pub fn high(stream: &[u64], sid: u64) -> u64 {
        match stream.iter().rposition(|&s| s == sid) {
            Some(p) => p as u64,
            None => low(stream, sid),
        }
    }
}
