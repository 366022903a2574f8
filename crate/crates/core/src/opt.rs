//! Offline replacement over a recorded page-reference trace: Belady's
//! furthest-next-use rule, an exhaustive search used to check it, and an
//! LRU replay for comparison.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::lru::Lru;
use crate::policy::ReplacementPolicy;
use crate::storage::PageId;
use crate::{FastMap, SimTime};

pub const BRUTE_FORCE_MAX_TRACE: usize = 20;
pub const BRUTE_FORCE_MAX_CAPACITY: usize = 4;

#[derive(Debug, Error)]
pub enum OptError {
    #[error("capacity must be at least one frame")]
    ZeroCapacity,
    #[error("instance too large for exhaustive search: {len} references, capacity {capacity}")]
    InstanceTooLarge { len: usize, capacity: usize },
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("trace times decrease at line {line}")]
    Unsorted { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: SimTime,
    pub page: PageId,
}

/// Page references in the order they were made; times never decrease.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pages(pages: impl IntoIterator<Item = PageId>) -> Self {
        Self {
            events: pages.into_iter().enumerate().map(|(i, page)| TraceEvent { time: i as SimTime, page }).collect(),
        }
    }

    /// Appends a reference; `time` is raised to the last one if it went back.
    pub fn record(&mut self, time: SimTime, page: PageId) {
        let time = self.events.last().map_or(time, |e| e.time.max(time));
        self.events.push(TraceEvent { time, page });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn pages(&self) -> impl Iterator<Item = PageId> + '_ {
        self.events.iter().map(|e| e.page)
    }

    pub fn distinct_pages(&self) -> usize {
        self.pages().collect::<BTreeSet<_>>().len()
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for e in &self.events {
            writeln!(w, "{} {} {} {}", e.time, e.page.table_version, e.page.column, e.page.index)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, OptError> {
        let mut trace = Trace::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| OptError::Parse { line: i + 1, reason: reason.to_string() };
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 space-separated fields"));
            }
            let time = fields[0].parse().map_err(|_| bad("bad time"))?;
            let version = fields[1].parse().map_err(|_| bad("bad table version"))?;
            let column = fields[2].parse().map_err(|_| bad("bad column"))?;
            let index = fields[3].parse().map_err(|_| bad("bad page index"))?;
            if trace.events.last().is_some_and(|e| e.time > time) {
                return Err(OptError::Unsorted { line: i + 1 });
            }
            trace.events.push(TraceEvent { time, page: PageId::new(version, column, index) });
        }
        Ok(trace)
    }
}

/// For each position, the position of the next reference to the same page.
fn next_uses(pages: &[PageId]) -> Vec<usize> {
    let mut next = vec![usize::MAX; pages.len()];
    let mut last: FastMap<PageId, usize> = FastMap::default();
    for (i, page) in pages.iter().enumerate().rev() {
        if let Some(&j) = last.get(page) {
            next[i] = j;
        }
        last.insert(*page, i);
    }
    next
}

/// Misses of Belady's policy: on a miss with a full cache, evict the page
/// referenced furthest ahead (never again counts as furthest, ties to the
/// larger page id).
pub fn opt_replay(trace: &Trace, capacity: usize) -> Result<u64, OptError> {
    opt_replay_with(trace, capacity, |_| {})
}

/// [`opt_replay`], calling `on_miss` with every page it loads.
pub fn opt_replay_with(trace: &Trace, capacity: usize, mut on_miss: impl FnMut(PageId)) -> Result<u64, OptError> {
    if capacity == 0 {
        return Err(OptError::ZeroCapacity);
    }
    let pages: Vec<PageId> = trace.pages().collect();
    let next = next_uses(&pages);
    let mut resident: FastMap<PageId, usize> = FastMap::default();
    let mut by_next: BTreeSet<(usize, PageId)> = BTreeSet::new();
    let mut misses = 0;
    for (i, &page) in pages.iter().enumerate() {
        match resident.get(&page) {
            Some(&n) => {
                by_next.remove(&(n, page));
            }
            None => {
                misses += 1;
                on_miss(page);
                if resident.len() == capacity {
                    let (_, victim) = by_next.pop_last().expect("cache full");
                    resident.remove(&victim);
                }
            }
        }
        resident.insert(page, next[i]);
        by_next.insert((next[i], page));
    }
    Ok(misses)
}

/// Minimum misses over every eviction choice. Small instances only.
pub fn brute_force_min_misses(trace: &Trace, capacity: usize) -> Result<u64, OptError> {
    if capacity == 0 {
        return Err(OptError::ZeroCapacity);
    }
    if trace.len() > BRUTE_FORCE_MAX_TRACE || capacity > BRUTE_FORCE_MAX_CAPACITY {
        return Err(OptError::InstanceTooLarge { len: trace.len(), capacity });
    }
    let pages: Vec<PageId> = trace.pages().collect();
    let mut memo = HashMap::new();
    Ok(search(&pages, 0, Vec::new(), capacity, &mut memo))
}

fn search(
    pages: &[PageId],
    pos: usize,
    cache: Vec<PageId>,
    capacity: usize,
    memo: &mut HashMap<(usize, Vec<PageId>), u64>,
) -> u64 {
    if pos == pages.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(pos, cache.clone())) {
        return v;
    }
    let page = pages[pos];
    let best = if cache.contains(&page) {
        search(pages, pos + 1, cache.clone(), capacity, memo)
    } else if cache.len() < capacity {
        let mut next = cache.clone();
        next.push(page);
        next.sort_unstable();
        1 + search(pages, pos + 1, next, capacity, memo)
    } else {
        (0..cache.len())
            .map(|victim| {
                let mut next = cache.clone();
                next[victim] = page;
                next.sort_unstable();
                1 + search(pages, pos + 1, next, capacity, memo)
            })
            .min()
            .expect("nonempty cache")
    };
    memo.insert((pos, cache), best);
    best
}

/// Misses of LRU over the same reference string.
pub fn lru_replay(trace: &Trace, capacity: usize) -> Result<u64, OptError> {
    if capacity == 0 {
        return Err(OptError::ZeroCapacity);
    }
    let mut lru = Lru::new();
    let mut misses = 0;
    for e in trace.events() {
        if lru.contains(e.page) {
            lru.on_access(e.page, e.time);
            continue;
        }
        misses += 1;
        if lru.len() == capacity {
            let victim = lru.select_victims(1, e.time)[0];
            lru.on_evicted(victim);
        }
        lru.on_loaded(e.page, e.time);
    }
    Ok(misses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(ids: &[u64]) -> Trace {
        Trace::from_pages(ids.iter().map(|&i| PageId::new(0, 0, i)))
    }

    #[test]
    fn basic_counts() {
        assert_eq!(opt_replay(&t(&[1, 1, 1]), 1).unwrap(), 1);
        assert_eq!(opt_replay(&t(&[1, 2, 3, 4, 5]), 5).unwrap(), 5);
        assert_eq!(opt_replay(&t(&[]), 3).unwrap(), 0);
        assert_eq!(brute_force_min_misses(&t(&[]), 3).unwrap(), 0);
        assert!(matches!(opt_replay(&t(&[1]), 0), Err(OptError::ZeroCapacity)));
    }

    #[test]
    fn classic_reference_string() {
        let trace = t(&[1, 2, 3, 4, 1, 2, 5, 1, 2, 3, 4, 5]);
        let exhaustive = brute_force_min_misses(&trace, 3).unwrap();
        assert_eq!(opt_replay(&trace, 3).unwrap(), exhaustive);
        assert_eq!(exhaustive, 7);
        assert_eq!(lru_replay(&trace, 3).unwrap(), 10);
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        assert!(matches!(brute_force_min_misses(&t(&[0; 21]), 2), Err(OptError::InstanceTooLarge { .. })));
        assert!(matches!(brute_force_min_misses(&t(&[0]), 5), Err(OptError::InstanceTooLarge { .. })));
    }

    #[test]
    fn trace_file_round_trip() {
        let mut trace = Trace::new();
        trace.record(5, PageId::new(3, 1, 99));
        trace.record(5, PageId::new(0, 0, 0));
        trace.record(u64::MAX, PageId::new(u32::MAX, u32::MAX, u64::MAX));
        let mut buf = Vec::new();
        trace.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().next(), Some("5 3 1 99"));
        let back = Trace::read_from(&buf[..]).unwrap();
        assert_eq!(back, trace);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
        assert!(matches!(Trace::read_from(&b"2 0 0 0\n1 0 0 0\n"[..]), Err(OptError::Unsorted { line: 2 })));
        assert!(matches!(Trace::read_from(&b"1 0 0\n"[..]), Err(OptError::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn belady_matches_exhaustive(ids in prop::collection::vec(0u64..7, 0..=20), cap in 1usize..=4) {
            let trace = t(&ids);
            prop_assert_eq!(opt_replay(&trace, cap).unwrap(), brute_force_min_misses(&trace, cap).unwrap());
        }

        #[test]
        fn belady_beats_lru_and_is_monotone(ids in prop::collection::vec(0u64..30, 0..400), cap in 1usize..20) {
            let trace = t(&ids);
            let here = opt_replay(&trace, cap).unwrap();
            prop_assert!(here <= lru_replay(&trace, cap).unwrap());
            prop_assert!(opt_replay(&trace, cap + 1).unwrap() <= here);
            prop_assert!(here >= trace.distinct_pages() as u64);
        }
    }
}
