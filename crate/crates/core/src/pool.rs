//! Fixed-capacity frame pool shared by every table and policy of a run.
//!
//! The pool owns residency, pin counts and in-flight loads; victim choice is
//! delegated to a [`ReplacementPolicy`] passed in by the caller. Frames are
//! reserved when a load is issued, so `resident + in_flight <= capacity`
//! holds at every simulated instant.

use thiserror::Error;

use crate::io::{IoChannel, IoModel};
use crate::policy::ReplacementPolicy;
use crate::storage::PageId;
use crate::{FastMap, SimTime};

pub const DEFAULT_GROUP_SIZE: usize = 16;

pub type TicketId = u64;
/// Opaque token identifying whoever waits on a load.
pub type Waiter = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("buffer pool exhausted: {pinned} of {capacity} frames pinned, {in_flight} loading")]
    Exhausted { capacity: usize, pinned: usize, in_flight: usize },
    #[error("load of {0} completed twice")]
    DuplicateCompletion(PageId),
    #[error("page {0} is not resident")]
    NotResident(PageId),
    #[error("unpin of {0} below zero")]
    UnpinUnderflow(PageId),
    #[error("pool capacity must be at least one frame")]
    ZeroCapacity,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub page: PageId,
    pub pin_count: u32,
    pub loaded_at: SimTime,
}

#[derive(Clone, Debug)]
struct LoadTicket {
    id: TicketId,
    bytes: u64,
    waiters: Vec<Waiter>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Access {
    Hit,
    /// `completes_at` is set when this request started a new load; requests
    /// that join an in-flight load get `None`.
    Miss {
        ticket: TicketId,
        completes_at: Option<SimTime>,
    },
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub io_pages_loaded: u64,
    pub io_bytes: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub peak_occupancy: usize,
}

#[derive(Debug)]
pub struct BufferPool {
    capacity: usize,
    group_size: usize,
    frames: FastMap<PageId, Frame>,
    loading: FastMap<PageId, LoadTicket>,
    io: IoChannel,
    next_ticket: TicketId,
    stats: PoolStats,
}

impl BufferPool {
    pub fn new(capacity: usize, group_size: usize, io: IoModel) -> Result<Self, PoolError> {
        if capacity == 0 {
            return Err(PoolError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            group_size: group_size.max(1),
            frames: FastMap::default(),
            loading: FastMap::default(),
            io: IoChannel::new(io),
            next_ticket: 0,
            stats: PoolStats::default(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn io(&self) -> &IoChannel {
        &self.io
    }

    pub fn is_resident(&self, page: PageId) -> bool {
        self.frames.contains_key(&page)
    }

    pub fn is_loading(&self, page: PageId) -> bool {
        self.loading.contains_key(&page)
    }

    pub fn frame(&self, page: PageId) -> Option<&Frame> {
        self.frames.get(&page)
    }

    pub fn pin_count(&self, page: PageId) -> u32 {
        self.frames.get(&page).map_or(0, |f| f.pin_count)
    }

    pub fn resident_count(&self) -> usize {
        self.frames.len()
    }

    pub fn in_flight_count(&self) -> usize {
        self.loading.len()
    }

    pub fn free_frames(&self) -> usize {
        self.capacity - self.frames.len() - self.loading.len()
    }

    /// Resident pages with no pins, in page order.
    pub fn unpinned_pages(&self) -> Vec<PageId> {
        let mut v: Vec<PageId> = self.frames.values().filter(|f| f.pin_count == 0).map(|f| f.page).collect();
        v.sort_unstable();
        v
    }

    fn pinned_count(&self) -> usize {
        self.frames.values().filter(|f| f.pin_count > 0).count()
    }

    /// Logical page reference. A hit pins the frame for `waiter` (when
    /// given); a miss joins or starts a load, evicting first if every frame
    /// is taken.
    pub fn request_page<P: ReplacementPolicy + ?Sized>(
        &mut self,
        policy: &mut P,
        page: PageId,
        bytes: u64,
        now: SimTime,
        waiter: Option<Waiter>,
    ) -> Result<Access, PoolError> {
        if self.frames.contains_key(&page) {
            self.stats.hits += 1;
            if waiter.is_some() {
                self.pin(policy, page, now)?;
            }
            policy.on_access(page, now);
            return Ok(Access::Hit);
        }
        self.stats.misses += 1;
        if let Some(ticket) = self.loading.get_mut(&page) {
            ticket.waiters.extend(waiter);
            return Ok(Access::Miss { ticket: ticket.id, completes_at: None });
        }
        if self.free_frames() == 0 {
            self.evict(policy, 1, now)?;
        }
        let id = self.next_ticket;
        self.next_ticket += 1;
        self.loading.insert(page, LoadTicket { id, bytes, waiters: waiter.into_iter().collect() });
        self.stats.peak_occupancy = self.stats.peak_occupancy.max(self.frames.len() + self.loading.len());
        let completes_at = self.io.enqueue(bytes, now);
        Ok(Access::Miss { ticket: id, completes_at: Some(completes_at) })
    }

    /// Evict `max(n_min, group_size)` unpinned pages chosen by the policy,
    /// or as many as exist.
    pub fn evict<P: ReplacementPolicy + ?Sized>(
        &mut self,
        policy: &mut P,
        n_min: usize,
        now: SimTime,
    ) -> Result<Vec<PageId>, PoolError> {
        let k = n_min.max(self.group_size);
        let nominated = policy.select_victims(k, now);
        let evicted = self.evict_pages(policy, &nominated);
        if evicted.is_empty() && n_min > 0 {
            return Err(PoolError::Exhausted {
                capacity: self.capacity,
                pinned: self.pinned_count(),
                in_flight: self.loading.len(),
            });
        }
        Ok(evicted)
    }

    /// Evict the listed pages that are resident and unpinned; others are skipped.
    pub fn evict_pages<P: ReplacementPolicy + ?Sized>(&mut self, policy: &mut P, pages: &[PageId]) -> Vec<PageId> {
        let mut evicted = Vec::with_capacity(pages.len());
        for &page in pages {
            match self.frames.get(&page) {
                Some(f) if f.pin_count == 0 => {
                    self.frames.remove(&page);
                    policy.on_evicted(page);
                    self.stats.evictions += 1;
                    evicted.push(page);
                }
                _ => {}
            }
        }
        evicted
    }

    /// Finish a load: the page becomes resident and every waiter gets a pin.
    pub fn complete_load<P: ReplacementPolicy + ?Sized>(
        &mut self,
        policy: &mut P,
        page: PageId,
        now: SimTime,
    ) -> Result<Vec<Waiter>, PoolError> {
        let ticket = self.loading.remove(&page).ok_or(PoolError::DuplicateCompletion(page))?;
        if self.frames.contains_key(&page) {
            return Err(PoolError::DuplicateCompletion(page));
        }
        self.frames.insert(page, Frame { page, pin_count: 0, loaded_at: now });
        self.stats.io_pages_loaded += 1;
        self.stats.io_bytes += ticket.bytes;
        policy.on_loaded(page, now);
        for _ in &ticket.waiters {
            self.pin(policy, page, now)?;
        }
        Ok(ticket.waiters)
    }

    pub fn pin<P: ReplacementPolicy + ?Sized>(
        &mut self,
        policy: &mut P,
        page: PageId,
        now: SimTime,
    ) -> Result<(), PoolError> {
        let frame = self.frames.get_mut(&page).ok_or(PoolError::NotResident(page))?;
        frame.pin_count += 1;
        if frame.pin_count == 1 {
            policy.on_pinned(page, now);
        }
        Ok(())
    }

    pub fn unpin<P: ReplacementPolicy + ?Sized>(
        &mut self,
        policy: &mut P,
        page: PageId,
        now: SimTime,
    ) -> Result<(), PoolError> {
        let frame = self.frames.get_mut(&page).ok_or(PoolError::NotResident(page))?;
        if frame.pin_count == 0 {
            return Err(PoolError::UnpinUnderflow(page));
        }
        frame.pin_count -= 1;
        if frame.pin_count == 0 {
            policy.on_unpinned(page, now);
        }
        Ok(())
    }
}
