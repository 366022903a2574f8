//! Discrete-event run of scan streams over one buffer pool and one I/O channel.
//!
//! LRU and PBM runs drive order-preserving scans that walk their range page
//! by page; CScans runs hand whole chunks out through the active buffer
//! manager. Each query is split into `parallelism` scans, each consuming
//! tuples at `cpu_rate`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use thiserror::Error;

use crate::cscans::{Abm, AbmError, AbmStats, CScanId, ChunkRequest};
use crate::delta::DeltaList;
use crate::io::IoModel;
use crate::list::TouchStats;
use crate::lru::Lru;
use crate::metrics::{sharing_histogram, Metrics, SharingSample};
use crate::opt::Trace;
use crate::pbm::{Pbm, PbmAudit};
use crate::policy::{ReplacementPolicy, ScanAware, ScanError, ScanId};
use crate::pool::{Access, BufferPool, PoolError, PoolStats, Waiter};
use crate::storage::{ColumnId, PageId, Snapshot, StorageError, TableModel, TableVersion, TupleRange};
use crate::workload::{footprint_pages, gen_microbenchmark, split_range, ExperimentConfig, PolicyKind, QuerySpec};
use crate::{FastMap, SimTime};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("deadlock at {time} ns: {unfinished} streams unfinished and nothing scheduled")]
    Deadlock { time: SimTime, unfinished: usize },
    #[error("tuple conservation: expected {expected}, produced {produced}")]
    TupleConservation { expected: u64, produced: u64 },
    #[error("PBM self-check failed: {0:?}")]
    Audit(PbmAudit),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Abm(#[from] AbmError),
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Metrics,
    /// Every logical page reference, in dispatch order.
    pub trace: Trace,
    pub capacity: usize,
    pub footprint: usize,
    pub pool: PoolStats,
    pub pbm_audit: Option<PbmAudit>,
    pub pbm_touch: Option<TouchStats>,
    pub abm: Option<AbmStats>,
    pub tuples_expected: u64,
    pub tuples_produced: u64,
}

/// Generate the configured workload and run it under `policy`.
pub fn run(cfg: &ExperimentConfig, policy: PolicyKind) -> Result<RunOutput, SimError> {
    run_queries(cfg, policy, &gen_microbenchmark(&cfg.workload))
}

/// Run explicit per-stream query lists.
pub fn run_queries(
    cfg: &ExperimentConfig,
    policy: PolicyKind,
    streams: &[Vec<QuerySpec>],
) -> Result<RunOutput, SimError> {
    cfg.validate().map_err(|e| SimError::Config(e.to_string()))?;
    let tables = cfg.tables()?;
    let mut version_table = FastMap::default();
    for (i, t) in tables.iter().enumerate() {
        if version_table.insert(t.version(), i).is_some() {
            return Err(SimError::Config(format!("table version {} used twice", t.version())));
        }
    }
    for q in streams.iter().flatten() {
        let table = tables.get(q.table).ok_or_else(|| SimError::Config(format!("query names table {}", q.table)))?;
        table.chunks_for_range(q.range)?;
        for &c in &q.columns {
            table.column(c)?;
        }
    }
    let footprint = footprint_pages(&tables, streams)?;
    let capacity = cfg.pool_capacity(footprint);
    let io = IoModel::new(cfg.bandwidth_bps);
    let backend = match policy {
        PolicyKind::Lru => {
            Backend::Ordered { pool: BufferPool::new(capacity, cfg.group_size, io)?, policy: Ordered::Lru(Lru::new()) }
        }
        PolicyKind::Pbm => {
            let pbm = Pbm::new(cfg.pbm);
            Backend::Ordered {
                pool: BufferPool::new(capacity, cfg.group_size, io)?,
                policy: Ordered::Pbm(if cfg.audit { pbm.with_audit() } else { pbm }),
            }
        }
        PolicyKind::CScans => Backend::CScans {
            abm: Abm::new(capacity, cfg.group_size, io)?,
            snapshots: tables.iter().map(|t| Arc::new(Snapshot::master(t, t.version() as u64))).collect(),
            deltas: tables.iter().map(|t| Arc::new(DeltaList::empty(t.tuple_count()))).collect(),
            threads_of: FastMap::default(),
        },
    };
    let sim = Sim {
        cfg,
        tables,
        queries: streams,
        streams: vec![StreamState::default(); streams.len()],
        threads: Vec::new(),
        retry: Vec::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0,
        work: 0,
        trace: Trace::new(),
        samples: Vec::new(),
        backend,
        tuples_expected: 0,
        tuples_produced: 0,
    };
    let mut out = sim.run()?;
    out.metrics.policy = policy.name().to_string();
    out.footprint = footprint;
    out.capacity = capacity;
    Ok(out)
}

trait OrderedPolicy: ReplacementPolicy + ScanAware {}
impl<T: ReplacementPolicy + ScanAware> OrderedPolicy for T {}

#[allow(clippy::large_enum_variant)]
enum Ordered {
    Lru(Lru),
    Pbm(Pbm),
}

impl Ordered {
    fn get(&mut self) -> &mut dyn OrderedPolicy {
        match self {
            Ordered::Lru(p) => p,
            Ordered::Pbm(p) => p,
        }
    }
}

enum Backend {
    Ordered { pool: BufferPool, policy: Ordered },
    CScans { abm: Abm, snapshots: Vec<Arc<Snapshot>>, deltas: Vec<Arc<DeltaList>>, threads_of: FastMap<CScanId, usize> },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    LoadDone(PageId),
    WorkDone(usize),
    Tick,
    Sample,
}

impl Event {
    fn periodic(self) -> bool {
        matches!(self, Event::Tick | Event::Sample)
    }
}

#[derive(Clone, Debug, Default)]
struct StreamState {
    next_query: usize,
    threads_left: usize,
    finished_at: Option<SimTime>,
}

struct Thread {
    stream: usize,
    version: TableVersion,
    columns: Vec<ColumnId>,
    tpp: Vec<u64>,
    bytes: Vec<u64>,
    chunk_size: u64,
    range: TupleRange,
    pos: u64,
    scan: ScanId,
    held: Vec<Option<PageId>>,
    waiting: Vec<bool>,
    pending: usize,
    in_retry: bool,
    done: bool,
}

impl Thread {
    fn want(&self, c: usize) -> PageId {
        PageId::new(self.version, self.columns[c], self.pos / self.tpp[c])
    }

    fn segment_end(&self, from: u64) -> u64 {
        self.tpp.iter().map(|&t| (from / t + 1) * t).min().unwrap_or(self.range.end).min(self.range.end)
    }
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    tables: Vec<TableModel>,
    queries: &'a [Vec<QuerySpec>],
    streams: Vec<StreamState>,
    threads: Vec<Thread>,
    /// Threads whose last page request found every frame taken.
    retry: Vec<usize>,
    heap: BinaryHeap<Reverse<(SimTime, u64, Event)>>,
    seq: u64,
    now: SimTime,
    /// Queued events other than periodic ones.
    work: usize,
    trace: Trace,
    samples: Vec<SharingSample>,
    backend: Backend,
    tuples_expected: u64,
    tuples_produced: u64,
}

impl Sim<'_> {
    fn push(&mut self, time: SimTime, ev: Event) {
        if !ev.periodic() {
            self.work += 1;
        }
        self.seq += 1;
        self.heap.push(Reverse((time, self.seq, ev)));
    }

    fn cpu_time(&self, tuples: u64) -> SimTime {
        (tuples as f64 * 1e9 / self.cfg.workload.cpu_rate).ceil() as SimTime
    }

    fn finished(&self) -> bool {
        self.streams.iter().all(|s| s.finished_at.is_some())
    }

    fn run(mut self) -> Result<RunOutput, SimError> {
        for s in 0..self.streams.len() {
            self.start_query(s)?;
        }
        self.abm_step()?;
        let slice = self.cfg.time_slice();
        if matches!(&self.backend, Backend::Ordered { policy, .. } if matches!(policy, Ordered::Pbm(_))) {
            self.push(slice, Event::Tick);
        }
        if self.cfg.sample_every > 0 {
            self.push(0, Event::Sample);
        }
        while !self.finished() {
            if self.work == 0 {
                return Err(SimError::Deadlock {
                    time: self.now,
                    unfinished: self.streams.iter().filter(|s| s.finished_at.is_none()).count(),
                });
            }
            let Some(Reverse((time, _, ev))) = self.heap.pop() else { break };
            self.now = time;
            if !ev.periodic() {
                self.work -= 1;
            }
            match ev {
                Event::LoadDone(page) => self.load_done(page)?,
                Event::WorkDone(i) => self.work_done(i)?,
                Event::Tick => {
                    self.tick();
                    if self.work > 0 {
                        self.push(time + slice, Event::Tick);
                    }
                }
                Event::Sample => {
                    self.sample();
                    if self.work > 0 {
                        self.push(time + slice * self.cfg.sample_every, Event::Sample);
                    }
                }
            }
            self.abm_step()?;
        }
        self.finish()
    }

    fn finish(self) -> Result<RunOutput, SimError> {
        if self.tuples_produced != self.tuples_expected {
            return Err(SimError::TupleConservation { expected: self.tuples_expected, produced: self.tuples_produced });
        }
        let (pool, pbm_audit, pbm_touch, abm) = match &self.backend {
            Backend::Ordered { pool, policy } => {
                let (audit, touch) = match policy {
                    Ordered::Pbm(p) => (Some(p.audit()), Some(p.timeline().touch_stats())),
                    Ordered::Lru(_) => (None, None),
                };
                (pool.stats(), audit, touch, None)
            }
            Backend::CScans { abm, .. } => (abm.pool().stats(), None, None, Some(abm.stats())),
        };
        if let Some(a) = pbm_audit.filter(|_| self.cfg.audit) {
            if a.consistency_violations + a.conservation_violations + a.order_violations > 0 {
                return Err(SimError::Audit(a));
            }
        }
        let metrics = Metrics {
            policy: String::new(),
            streams: self.streams.len(),
            pool_frac: self.cfg.pool_frac,
            bandwidth_bps: self.cfg.bandwidth_bps,
            seed: self.cfg.workload.seed,
            io_pages_loaded: pool.io_pages_loaded,
            io_bytes: pool.io_bytes,
            stream_times: self.streams.iter().map(|s| s.finished_at.unwrap_or(self.now)).collect(),
            sharing_samples: self.samples,
        };
        Ok(RunOutput {
            metrics,
            trace: self.trace,
            capacity: 0,
            footprint: 0,
            pool,
            pbm_audit,
            pbm_touch,
            abm,
            tuples_expected: self.tuples_expected,
            tuples_produced: self.tuples_produced,
        })
    }

    fn start_query(&mut self, s: usize) -> Result<(), SimError> {
        loop {
            let stream = &mut self.streams[s];
            let Some(q) = self.queries[s].get(stream.next_query) else {
                stream.finished_at = Some(self.now);
                return Ok(());
            };
            stream.next_query += 1;
            let pieces: Vec<TupleRange> =
                split_range(q.range, self.cfg.workload.parallelism).into_iter().filter(|r| !r.is_empty()).collect();
            if pieces.is_empty() {
                continue;
            }
            stream.threads_left = pieces.len();
            let table = &self.tables[q.table];
            let first = self.threads.len();
            for piece in pieces {
                let scan = match &mut self.backend {
                    Backend::Ordered { policy, .. } => {
                        policy.get().register_scan(table, &q.columns, &[piece], self.now)?
                    }
                    Backend::CScans { abm, snapshots, deltas, threads_of } => {
                        let (id, _) = abm.register_cscan(
                            snapshots[q.table].clone(),
                            table,
                            deltas[q.table].clone(),
                            &q.columns,
                            &[piece],
                            q.in_order,
                        )?;
                        threads_of.insert(id, self.threads.len());
                        id
                    }
                };
                self.tuples_expected += piece.len();
                self.threads.push(Thread {
                    stream: s,
                    version: table.version(),
                    columns: q.columns.clone(),
                    tpp: q
                        .columns
                        .iter()
                        .map(|&c| table.column(c).map(|d| d.tuples_per_page))
                        .collect::<Result<_, _>>()?,
                    bytes: q.columns.iter().map(|&c| table.bytes_per_page(c)).collect::<Result<_, _>>()?,
                    chunk_size: table.chunk_size(),
                    range: piece,
                    pos: piece.begin,
                    scan,
                    held: vec![None; q.columns.len()],
                    waiting: vec![false; q.columns.len()],
                    pending: 0,
                    in_retry: false,
                    done: false,
                });
            }
            for i in first..self.threads.len() {
                match self.backend {
                    Backend::Ordered { .. } => self.acquire(i)?,
                    Backend::CScans { .. } => self.request_chunk(i)?,
                }
            }
            return Ok(());
        }
    }

    fn thread_finished(&mut self, i: usize) -> Result<(), SimError> {
        self.threads[i].done = true;
        let s = self.threads[i].stream;
        self.streams[s].threads_left -= 1;
        if self.streams[s].threads_left == 0 {
            self.start_query(s)?;
        }
        Ok(())
    }

    /// Pin every page the thread's next segment needs, then start it.
    fn acquire(&mut self, i: usize) -> Result<(), SimError> {
        let Backend::Ordered { pool, policy } = &mut self.backend else { unreachable!("ordered path") };
        let th = &mut self.threads[i];
        for c in 0..th.columns.len() {
            if th.held[c].is_some() || th.waiting[c] {
                continue;
            }
            let page = th.want(c);
            match pool.request_page(policy.get(), page, th.bytes[c], self.now, Some(i as Waiter)) {
                Ok(Access::Hit) => th.held[c] = Some(page),
                Ok(Access::Miss { completes_at, .. }) => {
                    th.waiting[c] = true;
                    th.pending += 1;
                    if let Some(t) = completes_at {
                        self.work += 1;
                        self.seq += 1;
                        self.heap.push(Reverse((t, self.seq, Event::LoadDone(page))));
                    }
                }
                Err(PoolError::Exhausted { .. }) => {
                    if !th.in_retry {
                        th.in_retry = true;
                        self.retry.push(i);
                    }
                    return Ok(());
                }
                Err(e) => return Err(e.into()),
            }
            self.trace.record(self.now, page);
        }
        if th.pending == 0 {
            self.start_segment(i)?;
        }
        Ok(())
    }

    fn start_segment(&mut self, i: usize) -> Result<(), SimError> {
        let th = &self.threads[i];
        let end = th.segment_end(th.pos);
        let done_at = self.now + self.cpu_time(end - th.pos);
        self.push(done_at, Event::WorkDone(i));
        let Backend::Ordered { pool, policy } = &mut self.backend else { unreachable!("ordered path") };
        let th = &self.threads[i];
        let mut from = end;
        for _ in 0..self.cfg.prefetch {
            if from >= th.range.end {
                break;
            }
            for c in 0..th.columns.len() {
                let page = PageId::new(th.version, th.columns[c], from / th.tpp[c]);
                if pool.is_resident(page) || pool.is_loading(page) {
                    continue;
                }
                match pool.request_page(policy.get(), page, th.bytes[c], self.now, None) {
                    Ok(Access::Miss { completes_at: Some(t), .. }) => {
                        self.work += 1;
                        self.seq += 1;
                        self.heap.push(Reverse((t, self.seq, Event::LoadDone(page))));
                    }
                    Ok(_) | Err(PoolError::Exhausted { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            from = th.segment_end(from);
        }
        Ok(())
    }

    fn finish_segment(&mut self, i: usize) -> Result<(), SimError> {
        let Backend::Ordered { pool, policy } = &mut self.backend else { unreachable!("ordered path") };
        let policy = policy.get();
        let th = &mut self.threads[i];
        let end = th.segment_end(th.pos);
        self.tuples_produced += end - th.pos;
        th.pos = end;
        for c in 0..th.columns.len() {
            let Some(page) = th.held[c] else { continue };
            if end >= (page.index + 1) * th.tpp[c] || end == th.range.end {
                policy.page_consumed(th.scan, page);
                pool.unpin(policy, page, self.now)?;
                th.held[c] = None;
            }
        }
        if end.is_multiple_of(th.chunk_size) || end == th.range.end {
            for &col in &th.columns {
                policy.report_scan_position(th.scan, col, end - th.range.begin, self.now)?;
            }
        }
        if end == th.range.end {
            policy.unregister_scan(th.scan, self.now)?;
            self.thread_finished(i)
        } else {
            self.acquire(i)
        }
    }

    fn retry_blocked(&mut self) -> Result<(), SimError> {
        for i in std::mem::take(&mut self.retry) {
            self.threads[i].in_retry = false;
            self.acquire(i)?;
        }
        Ok(())
    }

    fn load_done(&mut self, page: PageId) -> Result<(), SimError> {
        match &mut self.backend {
            Backend::Ordered { pool, policy } => {
                let waiters = pool.complete_load(policy.get(), page, self.now)?;
                for w in waiters {
                    let i = w as usize;
                    let th = &mut self.threads[i];
                    let c = (0..th.columns.len())
                        .find(|&c| th.waiting[c] && th.want(c) == page)
                        .expect("waiter wants the page");
                    th.waiting[c] = false;
                    th.held[c] = Some(page);
                    th.pending -= 1;
                    if th.pending == 0 && !th.in_retry {
                        self.acquire(i)?;
                    }
                }
                self.retry_blocked()
            }
            Backend::CScans { abm, .. } => Ok(abm.load_complete(page, self.now)?),
        }
    }

    fn work_done(&mut self, i: usize) -> Result<(), SimError> {
        match &mut self.backend {
            Backend::Ordered { .. } => {
                self.finish_segment(i)?;
                self.retry_blocked()
            }
            Backend::CScans { abm, .. } => {
                abm.chunk_done(self.threads[i].scan, self.now)?;
                self.request_chunk(i)
            }
        }
    }

    fn request_chunk(&mut self, i: usize) -> Result<(), SimError> {
        let Backend::CScans { abm, .. } = &mut self.backend else { unreachable!("cscans path") };
        match abm.get_chunk(self.threads[i].scan)? {
            ChunkRequest::Ready(d) => {
                for &p in &d.pages {
                    self.trace.record(self.now, p);
                }
                self.tuples_produced += d.tuples;
                let done_at = self.now + self.cpu_time(d.tuples);
                self.push(done_at, Event::WorkDone(i));
            }
            ChunkRequest::Blocked => {}
            ChunkRequest::Done => {
                abm.unregister_cscan(self.threads[i].scan)?;
                self.thread_finished(i)?;
            }
        }
        Ok(())
    }

    /// Let the active buffer manager deliver and load until it has nothing new to do.
    fn abm_step(&mut self) -> Result<(), SimError> {
        loop {
            let Backend::CScans { abm, threads_of, .. } = &mut self.backend else { return Ok(()) };
            let sched = abm.schedule(self.now)?;
            if sched.woken.is_empty() && sched.loads.is_empty() {
                return Ok(());
            }
            let woken: Vec<usize> = sched.woken.iter().map(|id| threads_of[id]).collect();
            for (page, t) in sched.loads {
                self.push(t, Event::LoadDone(page));
            }
            for i in woken {
                self.request_chunk(i)?;
            }
        }
    }

    fn tick(&mut self) {
        if let Backend::Ordered { pool, policy: Ordered::Pbm(pbm) } = &mut self.backend {
            pbm.tick(self.now);
            if self.cfg.audit {
                pbm.check_conservation(&pool.unpinned_pages());
            }
        }
    }

    fn sample(&mut self) {
        let bins = match &self.backend {
            Backend::Ordered { .. } => {
                let mut counts: FastMap<PageId, u32> = FastMap::default();
                for th in self.threads.iter().filter(|t| !t.done) {
                    for c in 0..th.columns.len() {
                        for idx in th.pos / th.tpp[c]..=(th.range.end - 1) / th.tpp[c] {
                            *counts.entry(PageId::new(th.version, th.columns[c], idx)).or_default() += 1;
                        }
                    }
                }
                sharing_histogram(counts.into_values())
            }
            Backend::CScans { abm, .. } => sharing_histogram(abm.wanted_pages().into_values()),
        };
        self.samples.push(SharingSample { time: self.now, bins });
    }
}
