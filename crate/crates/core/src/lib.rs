//! Deterministic simulator of buffer management policies for concurrent
//! analytical scans: LRU, predictive buffer management, cooperative scans
//! and an offline optimal oracle, over a shared bandwidth-limited pool.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::BuildHasherDefault;

pub mod cli;
pub mod cscans;
pub mod delta;
pub mod io;
pub mod list;
pub mod lru;
pub mod metrics;
pub mod opt;
pub mod pbm;
pub mod policy;
pub mod pool;
pub mod sim;
pub mod storage;
pub mod workload;

/// Simulated time in nanoseconds.
pub type SimTime = u64;

/// Hash map with a fixed hasher so iteration order is identical across runs.
pub type FastMap<K, V> = HashMap<K, V, BuildHasherDefault<DefaultHasher>>;
