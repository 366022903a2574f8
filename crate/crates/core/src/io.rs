//! Bandwidth-limited storage channel: a single FIFO queue, no seek model.

use crate::SimTime;

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct IoModel {
    pub bandwidth_bps: u64,
}

impl IoModel {
    pub fn new(bandwidth_bps: u64) -> Self {
        Self { bandwidth_bps: bandwidth_bps.max(1) }
    }

    /// Transfer time of `bytes`, rounded up to whole nanoseconds.
    pub fn latency(&self, bytes: u64) -> SimTime {
        let ns = (bytes as u128 * NANOS_PER_SEC as u128).div_ceil(self.bandwidth_bps as u128);
        ns.min(u64::MAX as u128) as SimTime
    }
}

/// Loads are served strictly in arrival order; completion time is known at
/// enqueue time, so the channel never idles while work is queued.
#[derive(Clone, Debug)]
pub struct IoChannel {
    model: IoModel,
    busy_until: SimTime,
}

impl IoChannel {
    pub fn new(model: IoModel) -> Self {
        Self { model, busy_until: 0 }
    }

    pub fn model(&self) -> IoModel {
        self.model
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    /// Queue a transfer and return its completion time.
    pub fn enqueue(&mut self, bytes: u64, now: SimTime) -> SimTime {
        let start = self.busy_until.max(now);
        self.busy_until = start + self.model.latency(bytes);
        self.busy_until
    }
}
