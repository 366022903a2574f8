//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scanbench::cscans::Abm;
use scanbench::delta::{DeltaEntry, DeltaKind, DeltaList, ProcessedSet};
use scanbench::io::IoModel;
use scanbench::metrics::{write_csv, write_sharing_csv, Metrics};
use scanbench::opt::{brute_force_min_misses, lru_replay, opt_replay, Trace};
use scanbench::sim::{run, run_queries, RunOutput};
use scanbench::storage::{ColumnDef, ColumnId, PageId, Snapshot, TableDef, TableModel, TupleRange};
use scanbench::workload::{cpu_bound_stream_time, gen_microbenchmark, ExperimentConfig, PolicyKind, QuerySpec};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type PrefixCase<'a> = (&'static str, Vec<&'a [u64]>, Vec<u64>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sim(cfg: &ExperimentConfig, p: PolicyKind) -> Result<RunOutput, String> {
    run(cfg, p).map_err(|e| format!("{p} run failed: {e}"))
}

fn opt_matches_brute_force() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cases = 300;
    for i in 0..cases {
        let len = rng.gen_range(0..=20);
        let alphabet = rng.gen_range(1..=7);
        let trace = Trace::from_pages((0..len).map(|_| PageId::new(0, 0, rng.gen_range(0..alphabet))));
        let cap = rng.gen_range(1..=4);
        let opt = opt_replay(&trace, cap).map_err(|e| e.to_string())?;
        let brute = brute_force_min_misses(&trace, cap).map_err(|e| e.to_string())?;
        if opt != brute {
            return Err(format!("case {i}: opt {opt} != brute force {brute} (cap {cap}, len {len})"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("{cases} traces agree in {secs:.2}s"))
}

fn opt_dominates_pbm_and_lru() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 1..=20u64 {
        let mut cfg = ExperimentConfig::default();
        cfg.workload.seed = seed;
        cfg.pool_frac = if seed % 2 == 0 { 0.4 } else { 0.1 };
        let out = sim(&cfg, PolicyKind::Pbm)?;
        let opt = opt_replay(&out.trace, out.capacity).map_err(|e| e.to_string())?;
        let lru = lru_replay(&out.trace, out.capacity).map_err(|e| e.to_string())?;
        let pbm = out.metrics.io_pages_loaded;
        if opt > pbm || opt > lru {
            return Err(format!("seed {seed}: opt {opt}, pbm {pbm}, lru replay {lru}"));
        }
        worst = worst.max(opt as f64 / pbm as f64);
    }
    Ok(format!("20 runs, max opt/pbm {worst:.3}"))
}

fn full_pool_loads_each_page_once() -> Outcome {
    let mut detail = Vec::new();
    for seed in [1u64, 2] {
        let mut cfg = ExperimentConfig::default();
        cfg.workload.seed = seed;
        cfg.pool_frac = 1.0;
        for p in PolicyKind::ALL {
            let out = sim(&cfg, p)?;
            let distinct = out.trace.distinct_pages() as u64;
            let io = out.metrics.io_pages_loaded;
            if io != distinct {
                return Err(format!("seed {seed} {p}: io {io} != footprint {distinct}"));
            }
            detail.push(format!("{p}={io}"));
        }
    }
    Ok(detail.join(" "))
}

fn single_stream_policies_agree() -> Outcome {
    let base = ExperimentConfig::default();
    let tables = base.tables().map_err(|e| e.to_string())?;
    let t = &tables[0];
    let all_cols = t.column_ids();
    let whole = TupleRange::new(0, t.tuple_count());
    let query = |columns: Vec<ColumnId>| QuerySpec {
        stream: 0,
        seq: 0,
        table: 0,
        columns,
        range: whole,
        fraction: 1.0,
        in_order: false,
    };
    let mut points = 0;
    for frac in [0.1, 0.4, 1.0] {
        for par in [1usize, 4, 8] {
            for cols in [all_cols.clone(), vec![all_cols[0]]] {
                let mut cfg = base.clone();
                cfg.workload.streams = 1;
                cfg.workload.parallelism = par;
                cfg.pool_frac = frac;
                let streams = vec![vec![query(cols.clone())]];
                let mut ios = Vec::new();
                for p in PolicyKind::ALL {
                    let out = run_queries(&cfg, p, &streams).map_err(|e| format!("{p}: {e}"))?;
                    ios.push(out.metrics.io_pages_loaded);
                }
                if ios.iter().any(|&x| x != ios[0]) {
                    return Err(format!("pool {frac} parallelism {par} columns {cols:?}: io {ios:?}"));
                }
                points += 1;
            }
        }
    }
    Ok(format!("{points} configurations, identical io"))
}

fn microbenchmark_trend() -> Outcome {
    let start = Instant::now();
    let mut ordered = 0;
    let mut ratio_sum = 0.0;
    let mut small_pool_wins = 0;
    for seed in 1..=10u64 {
        let mut cfg = ExperimentConfig::default();
        cfg.workload.seed = seed;
        cfg.pool_frac = 0.4;
        let io = |cfg: &ExperimentConfig, p| sim(cfg, p).map(|o| o.metrics.io_pages_loaded);
        let (lru, pbm, cs) = (io(&cfg, PolicyKind::Lru)?, io(&cfg, PolicyKind::Pbm)?, io(&cfg, PolicyKind::CScans)?);
        if cs <= pbm && pbm < lru {
            ordered += 1;
        }
        ratio_sum += pbm as f64 / lru as f64;
        cfg.pool_frac = 0.1;
        if io(&cfg, PolicyKind::CScans)? < io(&cfg, PolicyKind::Pbm)? {
            small_pool_wins += 1;
        }
    }
    let mean = ratio_sum / 10.0;
    let secs = start.elapsed().as_secs_f64();
    check(
        ordered >= 9 && mean < 0.9 && small_pool_wins >= 8 && secs < 120.0,
        format!(
            "pool 40%: ordered on {ordered}/10, mean pbm/lru {mean:.3}; pool 10%: cscans < pbm on {small_pool_wins}/10; {secs:.1}s"
        ),
    )
}

fn cpu_bound_convergence() -> Outcome {
    let base = ExperimentConfig::default();
    let streams = gen_microbenchmark(&base.workload);
    let bound = streams
        .iter()
        .map(|q| cpu_bound_stream_time(q, base.workload.parallelism, base.workload.cpu_rate))
        .sum::<f64>()
        / streams.len() as f64;
    let bandwidths: Vec<u64> = (0..9).map(|i| 75_000_000u64 << i).collect();
    let mut io_range = vec![(u64::MAX, 0u64); PolicyKind::ALL.len()];
    let mut bound_points = 0;
    let mut worst_spread = 0.0f64;
    for &bw in &bandwidths {
        let mut cfg = base.clone();
        cfg.bandwidth_bps = bw;
        let mut times = Vec::new();
        for (i, p) in PolicyKind::ALL.into_iter().enumerate() {
            let out = sim(&cfg, p)?;
            let io = out.metrics.io_pages_loaded;
            io_range[i] = (io_range[i].0.min(io), io_range[i].1.max(io));
            times.push(out.metrics.avg_stream_s());
        }
        if times.iter().all(|&t| t <= bound * 1.05) {
            bound_points += 1;
            let lo = times.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = times.iter().cloned().fold(0.0, f64::max);
            worst_spread = worst_spread.max(hi / lo - 1.0);
        }
    }
    let group = base.group_size as u64;
    let io_ok = io_range.iter().all(|(lo, hi)| hi - lo <= 2 * group);
    let io_text: Vec<String> =
        PolicyKind::ALL.iter().zip(&io_range).map(|(p, (lo, hi))| format!("{p} {lo}..{hi}")).collect();
    check(
        bound_points > 0 && worst_spread <= 0.05 && io_ok,
        format!(
            "{bound_points}/{} cpu-bound points, max time spread {:.2}%; io across bandwidths {} (allowed width {})",
            bandwidths.len(),
            worst_spread * 100.0,
            io_text.join(", "),
            2 * group
        ),
    )
}

fn pbm_invariants_hold() -> Outcome {
    let mut checks = 0;
    let mut max_touch = 0;
    for seed in 1..=10u64 {
        let mut cfg = ExperimentConfig::default();
        cfg.workload.seed = seed;
        cfg.pool_frac = [0.1, 0.4][seed as usize % 2];
        cfg.audit = true;
        let out = sim(&cfg, PolicyKind::Pbm)?;
        let a = out.pbm_audit.ok_or("audit counters missing")?;
        let touch = out.pbm_touch.ok_or("touch counters missing")?;
        let violations = a.consistency_violations + a.conservation_violations + a.order_violations;
        if violations > 0 || a.consistency_checks == 0 || a.conservation_checks == 0 || touch.max_touches_per_op > 3 {
            return Err(format!("seed {seed}: {a:?} {touch:?}"));
        }
        checks += a.consistency_checks + a.conservation_checks + a.order_checks;
        max_touch = max_touch.max(touch.max_touches_per_op);
    }
    Ok(format!("10 runs, {checks} checks, 0 violations, max {max_touch} touches per bucket op"))
}

/// Visible stream materialized tuple by tuple: `stream[rid]` is the stable
/// chunk position the row comes from.
fn merged_sids(stable: u64, inserts: &[(u64, u64)], deletes: &BTreeSet<u64>) -> Vec<u64> {
    let mut out = Vec::new();
    for s in 0..=stable {
        for &(at, n) in inserts {
            if at == s {
                out.extend(std::iter::repeat_n(s, n as usize));
            }
        }
        if s < stable && !deletes.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn no_duplicate_delivery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = 600;
    for case in 0..cases {
        let stable = rng.gen_range(1..=60u64);
        let chunk = rng.gen_range(1..=10u64);
        let mut deletes = BTreeSet::new();
        let mut inserts = Vec::new();
        for _ in 0..rng.gen_range(0..=12) {
            if rng.gen_bool(0.5) {
                deletes.insert(rng.gen_range(0..stable));
            } else {
                inserts.push((rng.gen_range(0..=stable), rng.gen_range(1..=3u64)));
            }
        }
        let mut entries: Vec<DeltaEntry> = deletes.iter().map(|&s| DeltaEntry::delete(s)).collect();
        entries.extend(inserts.iter().map(|&(s, n)| DeltaEntry { sid: s, kind: DeltaKind::Insert(n) }));
        let deltas = DeltaList::new(stable, entries).map_err(|e| format!("case {case}: {e}"))?;
        let stream = merged_sids(stable, &inserts, &deletes);
        if deltas.visible_count() != stream.len() as u64 {
            return Err(format!("case {case}: visible {} != oracle {}", deltas.visible_count(), stream.len()));
        }
        let visible = stream.len() as u64;
        let a = rng.gen_range(0..=visible);
        let b = rng.gen_range(0..=visible);
        let registered = TupleRange::new(a.min(b), a.max(b));

        let chunks = stable.div_ceil(chunk);
        let mut order: Vec<u64> = (0..chunks).collect();
        order.shuffle(&mut rng);
        let mut processed = ProcessedSet::new();
        let mut got = vec![0u32; visible as usize];
        for c in order {
            let sids = TupleRange::new(c * chunk, ((c + 1) * chunk).min(stable));
            let rids = deltas.chunk_to_rid_range(sids).map_err(|e| format!("case {case}: {e}"))?;
            // every row whose stable position falls in the chunk must be covered
            for (rid, &s) in stream.iter().enumerate() {
                let owner = if s == stable { chunks - 1 } else { s / chunk };
                if owner == c && !rids.contains(rid as u64) {
                    return Err(format!("case {case}: rid {rid} of chunk {c} outside {rids:?}"));
                }
            }
            let Some(part) = rids.intersect(&registered) else { continue };
            for r in processed.trim_delivered(part) {
                for rid in r.begin..r.end {
                    got[rid as usize] += 1;
                }
            }
        }
        for (rid, &n) in got.iter().enumerate() {
            let want = u32::from(registered.contains(rid as u64));
            if n != want {
                return Err(format!("case {case}: rid {rid} delivered {n} times, expected {want}"));
            }
        }
    }
    Ok(format!("{cases} delta lists with shuffled chunk orders, exact cover"))
}

fn shared_prefix_examples() -> Outcome {
    let table = TableModel::new(TableDef {
        table_id: 1,
        version: 0,
        tuple_count: 40,
        columns: vec![ColumnDef::new(0, 10)],
        chunk_size: 10,
    })
    .map_err(|e| e.to_string())?;
    let snap = |id: u64, pages: &[u64]| {
        let list = pages.iter().map(|&i| PageId::new(0, 0, i)).collect();
        Arc::new(Snapshot::with_pages(id, &table, pages.len() as u64 * 10, vec![list]))
    };
    let t1: &[u64] = &[0, 1, 2, 3, 4, 5];
    let t2: &[u64] = &[0, 1, 2, 3, 6, 7];
    let t3: &[u64] = &[0, 1, 2, 3, 6, 7, 8, 9];
    let t4: &[u64] = &[0, 1, 2, 3, 6, 7, 10, 11];
    let cases: [PrefixCase; 3] = [
        ("T1,T2", vec![t1, t2], vec![0, 1, 2, 3]),
        ("T1,T3,T4", vec![t1, t3, t4], vec![0, 1, 2, 3, 6, 7]),
        ("T2,T3,T4", vec![t2, t3, t4], vec![0, 1, 2, 3, 6, 7]),
    ];
    let mut detail = Vec::new();
    for (name, snaps, want) in cases {
        let mut abm = Abm::new(64, 16, IoModel::new(655_360_000)).map_err(|e| e.to_string())?;
        for (i, pages) in snaps.iter().enumerate() {
            let s = snap(i as u64 + 2, pages);
            let n = s.tuple_count;
            abm.register_cscan(s, &table, Arc::new(DeltaList::empty(n)), &[0], &[TupleRange::new(0, n)], false)
                .map_err(|e| format!("{name}: {e}"))?;
        }
        let got: Vec<u64> = abm.shared_prefix(0)[0].iter().map(|p| p.index).collect();
        if got != want {
            return Err(format!("{name}: prefix {got:?}, expected {want:?}"));
        }
        detail.push(format!("{name} -> {got:?}"));
    }
    Ok(detail.join("; "))
}

fn csv_bytes(cfg: &ExperimentConfig) -> Result<(Vec<u8>, Vec<u8>), String> {
    let runs: Vec<Metrics> =
        PolicyKind::ALL.into_iter().map(|p| sim(cfg, p).map(|o| o.metrics)).collect::<Result<_, _>>()?;
    let records: Vec<_> = runs.iter().map(Metrics::record).collect();
    let (mut main, mut sharing) = (Vec::new(), Vec::new());
    write_csv(&records, &mut main).map_err(|e| e.to_string())?;
    write_sharing_csv(runs.iter().map(|m| m.sharing_samples.as_slice()), &mut sharing).map_err(|e| e.to_string())?;
    Ok((main, sharing))
}

fn repeat_runs_are_byte_identical() -> Outcome {
    for seed in [1u64, 5] {
        let mut cfg = ExperimentConfig::default();
        cfg.workload.seed = seed;
        cfg.pool_frac = 0.25;
        let first = csv_bytes(&cfg)?;
        let second = csv_bytes(&cfg)?;
        if first != second {
            return Err(format!("seed {seed}: CSV output differs between repeat runs"));
        }
    }
    Ok("2 configurations x 3 policies, identical CSV and sharing output".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("opt equals brute force", opt_matches_brute_force),
        ("opt dominates pbm and lru replay", opt_dominates_pbm_and_lru),
        ("full pool loads each page once", full_pool_loads_each_page_once),
        ("single stream policies agree", single_stream_policies_agree),
        ("microbenchmark trend", microbenchmark_trend),
        ("cpu-bound convergence", cpu_bound_convergence),
        ("pbm structural invariants", pbm_invariants_hold),
        ("no duplicate delivery", no_duplicate_delivery),
        ("shared prefix examples", shared_prefix_examples),
        ("determinism", repeat_runs_are_byte_identical),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
