//! Microbenchmark workloads and experiment configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pbm::{PbmConfig, NANOS_PER_MILLI};
use crate::pool::DEFAULT_GROUP_SIZE;
use crate::storage::{
    ColumnDef, ColumnId, PageId, StorageError, TableDef, TableModel, TupleRange, DEFAULT_PAGE_SIZE_BYTES,
};
use crate::SimTime;

pub const SCAN_FRACTIONS: [f64; 4] = [0.01, 0.1, 0.5, 1.0];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Lru,
    Pbm,
    CScans,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Lru, PolicyKind::Pbm, PolicyKind::CScans];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Lru => "lru",
            PolicyKind::Pbm => "pbm",
            PolicyKind::CScans => "cscans",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lru" => Ok(PolicyKind::Lru),
            "pbm" => Ok(PolicyKind::Pbm),
            "cscans" => Ok(PolicyKind::CScans),
            _ => Err(format!("unknown policy `{s}`")),
        }
    }
}

/// One scan query of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySpec {
    pub stream: usize,
    pub seq: usize,
    pub table: usize,
    pub columns: Vec<ColumnId>,
    pub range: TupleRange,
    pub fraction: f64,
    pub in_order: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub tables: Vec<TableDef>,
    pub streams: usize,
    pub queries_per_stream: usize,
    pub fractions: Vec<f64>,
    pub seed: u64,
    /// Tuples per second one scan thread processes.
    pub cpu_rate: f64,
    /// Threads per query.
    pub parallelism: usize,
    /// Cooperative scans must deliver chunks in order.
    pub in_order: bool,
}

/// Default desk-scale fact table: 256 chunks of 4096 tuples, two columns.
pub fn default_table() -> TableDef {
    TableDef {
        table_id: 0,
        version: 0,
        tuple_count: 256 * 4096,
        columns: vec![ColumnDef::new(0, 512), ColumnDef::new(1, 2048)],
        chunk_size: 4096,
    }
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            tables: vec![default_table()],
            streams: 8,
            queries_per_stream: 16,
            fractions: vec![0.5],
            seed: 1,
            cpu_rate: 25_000.0,
            parallelism: 8,
            in_order: false,
        }
    }
}

/// Cut `[a, b)` into `n` consecutive pieces at `a + floor((b - a) * i / n)`.
pub fn split_range(range: TupleRange, n: usize) -> Vec<TupleRange> {
    let n = n.max(1) as u128;
    let len = range.len() as u128;
    let cut = |i: u128| range.begin + (len * i / n) as u64;
    (0..n).map(|i| TupleRange::new(cut(i), cut(i + 1))).collect()
}

/// Query lists per stream. Each stream draws from its own RNG stream, and
/// queries alternate between the all-columns and the first-column-only set.
pub fn gen_microbenchmark(spec: &WorkloadSpec) -> Vec<Vec<QuerySpec>> {
    (0..spec.streams)
        .map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream as u64);
            (0..spec.queries_per_stream)
                .map(|seq| {
                    let table_idx = rng.gen_range(0..spec.tables.len());
                    let table = &spec.tables[table_idx];
                    let fraction = spec.fractions[rng.gen_range(0..spec.fractions.len())];
                    let n = table.tuple_count;
                    let len = ((n as f64 * fraction).round() as u64).clamp(1, n);
                    let start = rng.gen_range(0..=n - len);
                    let columns = if (stream + seq) % 2 == 0 {
                        table.columns.iter().map(|c| c.column_id).collect()
                    } else {
                        vec![table.columns[0].column_id]
                    };
                    QuerySpec {
                        stream,
                        seq,
                        table: table_idx,
                        columns,
                        range: TupleRange::new(start, start + len),
                        fraction,
                        in_order: spec.in_order,
                    }
                })
                .collect()
        })
        .collect()
}

/// Distinct pages a query's scans touch, read page by page.
pub fn query_pages(table: &TableModel, q: &QuerySpec) -> Result<BTreeSet<PageId>, StorageError> {
    let mut pages = BTreeSet::new();
    for &c in &q.columns {
        pages.extend(table.pages_for_range(c, q.range)?);
    }
    Ok(pages)
}

/// Distinct pages a query touches when read whole chunks at a time.
pub fn query_chunk_pages(table: &TableModel, q: &QuerySpec) -> Result<BTreeSet<PageId>, StorageError> {
    let mut pages = BTreeSet::new();
    for chunk in table.chunks_for_range(q.range)? {
        let range = table.chunk_range(chunk)?;
        for &c in &q.columns {
            pages.extend(table.pages_for_range(c, range)?);
        }
    }
    Ok(pages)
}

/// Chunk-granular footprint of the whole workload; pool sizes are fractions of it.
pub fn footprint_pages(tables: &[TableModel], streams: &[Vec<QuerySpec>]) -> Result<usize, StorageError> {
    let mut all = BTreeSet::new();
    for q in streams.iter().flatten() {
        all.extend(query_chunk_pages(&tables[q.table], q)?);
    }
    Ok(all.len())
}

/// Time a stream needs when never waiting for I/O: each query takes as long
/// as its largest thread share.
pub fn cpu_bound_stream_time(queries: &[QuerySpec], parallelism: usize, cpu_rate: f64) -> f64 {
    queries
        .iter()
        .map(|q| {
            let widest = split_range(q.range, parallelism).iter().map(|r| r.len()).max().unwrap_or(0);
            widest as f64 / cpu_rate
        })
        .sum()
}

/// Everything a run needs besides the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub workload: WorkloadSpec,
    pub policies: Vec<PolicyKind>,
    /// Pool size as a fraction of the workload footprint; ignored when
    /// `capacity` is set.
    pub pool_frac: f64,
    pub capacity: Option<usize>,
    pub bandwidth_bps: u64,
    pub group_size: usize,
    /// Pages an order-preserving scan keeps requested ahead of its position.
    pub prefetch: usize,
    pub pbm: PbmConfig,
    /// Sharing-potential samples every this many time slices.
    pub sample_every: u64,
    /// Run the PBM self-checks during the simulation.
    pub audit: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let workload = WorkloadSpec::default();
        let pbm = PbmConfig { initial_speed: workload.cpu_rate, ..PbmConfig::default() };
        Self {
            workload,
            policies: PolicyKind::ALL.to_vec(),
            pool_frac: 0.4,
            capacity: None,
            bandwidth_bps: 75_000_000,
            group_size: DEFAULT_GROUP_SIZE,
            prefetch: 1,
            pbm,
            sample_every: 10,
            audit: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue { key: key.to_string(), value: value.to_string(), reason: reason.to_string() }
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 21] = [
        "streams",
        "queries_per_stream",
        "fractions",
        "seed",
        "cpu_rate",
        "parallelism",
        "in_order",
        "tuples",
        "chunk_size",
        "tuples_per_page",
        "page_size",
        "policy",
        "pool_frac",
        "capacity",
        "bandwidth",
        "group_size",
        "prefetch",
        "time_slice_ms",
        "bucket_groups",
        "buckets_per_group",
        "audit",
    ];

    /// Apply one `key = value` setting. Keys accept `-` in place of `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let w = &mut self.workload;
        match key.as_str() {
            "streams" => w.streams = parse(&key, value)?,
            "queries_per_stream" => w.queries_per_stream = parse(&key, value)?,
            "fractions" => {
                let fs: Vec<f64> = parse_list(&key, value)?;
                if fs.is_empty() || fs.iter().any(|f| !SCAN_FRACTIONS.contains(f)) {
                    return Err(bad(&key, value, "fractions must come from 0.01, 0.1, 0.5, 1"));
                }
                w.fractions = fs;
            }
            "seed" => w.seed = parse(&key, value)?,
            "cpu_rate" => {
                w.cpu_rate = parse(&key, value)?;
                if w.cpu_rate.is_nan() || w.cpu_rate <= 0.0 {
                    return Err(bad(&key, value, "must be positive"));
                }
                self.pbm.initial_speed = w.cpu_rate;
            }
            "parallelism" => w.parallelism = parse(&key, value)?,
            "in_order" => w.in_order = parse(&key, value)?,
            "tuples" => w.tables[0].tuple_count = parse(&key, value)?,
            "chunk_size" => w.tables[0].chunk_size = parse(&key, value)?,
            "tuples_per_page" => {
                let tpps: Vec<u64> = parse_list(&key, value)?;
                let size = w.tables[0].columns.first().map_or(DEFAULT_PAGE_SIZE_BYTES, |c| c.page_size_bytes);
                w.tables[0].columns = tpps
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| ColumnDef { column_id: i as ColumnId, tuples_per_page: t, page_size_bytes: size })
                    .collect();
            }
            "page_size" => {
                let size = parse(&key, value)?;
                w.tables[0].columns.iter_mut().for_each(|c| c.page_size_bytes = size);
            }
            "policy" => {
                self.policies = if value == "all" {
                    PolicyKind::ALL.to_vec()
                } else {
                    value
                        .split(',')
                        .map(|p| p.trim().parse().map_err(|e: String| bad(&key, value, &e)))
                        .collect::<Result<_, _>>()?
                }
            }
            "pool_frac" => {
                self.pool_frac = parse(&key, value)?;
                if self.pool_frac.is_nan() || self.pool_frac <= 0.0 {
                    return Err(bad(&key, value, "must be positive"));
                }
            }
            "capacity" => self.capacity = Some(parse(&key, value)?),
            "bandwidth" => self.bandwidth_bps = parse(&key, value)?,
            "group_size" => self.group_size = parse(&key, value)?,
            "prefetch" => self.prefetch = parse(&key, value)?,
            "time_slice_ms" => self.pbm.time_slice = parse::<u64>(&key, value)? * NANOS_PER_MILLI,
            "bucket_groups" => self.pbm.groups = parse(&key, value)?,
            "buckets_per_group" => self.pbm.buckets_per_group = parse(&key, value)?,
            "audit" => self.audit = parse(&key, value)?,
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = &self.workload;
        for t in &w.tables {
            TableModel::new(t.clone())?;
        }
        let positive = [
            ("streams", w.streams),
            ("parallelism", w.parallelism),
            ("group_size", self.group_size),
            ("bucket_groups", self.pbm.groups),
            ("buckets_per_group", self.pbm.buckets_per_group),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(bad(k, "0", "must be at least 1"));
            }
        }
        if self.bandwidth_bps == 0 {
            return Err(bad("bandwidth", "0", "must be positive"));
        }
        if self.pbm.time_slice == 0 {
            return Err(bad("time_slice_ms", "0", "must be positive"));
        }
        if self.capacity == Some(0) {
            return Err(bad("capacity", "0", "must be at least 1"));
        }
        Ok(())
    }

    pub fn tables(&self) -> Result<Vec<TableModel>, StorageError> {
        self.workload.tables.iter().cloned().map(TableModel::new).collect()
    }

    /// Frames for a workload with the given footprint.
    pub fn pool_capacity(&self, footprint: usize) -> usize {
        self.capacity.unwrap_or_else(|| ((footprint as f64 * self.pool_frac).ceil() as usize).max(1))
    }

    pub fn time_slice(&self) -> SimTime {
        self.pbm.time_slice
    }
}
