//! Run measurements, CSV output and the comparison summary.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::SimTime;

pub const CSV_HEADER: &str = "policy,streams,pool_frac,bandwidth_bps,seed,io_pages,io_bytes,avg_stream_s,max_stream_s";
pub const SHARING_HEADER: &str = "time_ns,k1,k2,k3,k4plus";

#[derive(Debug, Error, PartialEq)]
pub enum CsvError {
    #[error("missing or wrong header")]
    Header,
    #[error("line {line}: {reason}")]
    Row { line: usize, reason: String },
}

/// Pages still wanted by 1, 2, 3 and 4 or more scans at one instant.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct SharingSample {
    pub time: SimTime,
    pub bins: [u64; 4],
}

/// Bin per-page wanting-scan counts; zero counts are ignored.
pub fn sharing_histogram(counts: impl IntoIterator<Item = u32>) -> [u64; 4] {
    let mut bins = [0; 4];
    for k in counts {
        if k > 0 {
            bins[(k as usize).min(4) - 1] += 1;
        }
    }
    bins
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub policy: String,
    pub streams: usize,
    pub pool_frac: f64,
    pub bandwidth_bps: u64,
    pub seed: u64,
    pub io_pages_loaded: u64,
    pub io_bytes: u64,
    /// Completion time of each stream, all streams starting at zero.
    pub stream_times: Vec<SimTime>,
    pub sharing_samples: Vec<SharingSample>,
}

fn seconds(t: SimTime) -> f64 {
    t as f64 / 1e9
}

impl Metrics {
    pub fn avg_stream_s(&self) -> f64 {
        if self.stream_times.is_empty() {
            return 0.0;
        }
        self.stream_times.iter().map(|&t| seconds(t)).sum::<f64>() / self.stream_times.len() as f64
    }

    pub fn max_stream_s(&self) -> f64 {
        self.stream_times.iter().max().map_or(0.0, |&t| seconds(t))
    }

    pub fn record(&self) -> RunRecord {
        RunRecord {
            policy: self.policy.clone(),
            streams: self.streams,
            pool_frac: self.pool_frac,
            bandwidth_bps: self.bandwidth_bps,
            seed: self.seed,
            io_pages: self.io_pages_loaded,
            io_bytes: self.io_bytes,
            avg_stream_s: self.avg_stream_s(),
            max_stream_s: self.max_stream_s(),
        }
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub policy: String,
    pub streams: usize,
    pub pool_frac: f64,
    pub bandwidth_bps: u64,
    pub seed: u64,
    pub io_pages: u64,
    pub io_bytes: u64,
    pub avg_stream_s: f64,
    pub max_stream_s: f64,
}

pub fn write_csv(records: &[RunRecord], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.policy,
            r.streams,
            r.pool_frac,
            r.bandwidth_bps,
            r.seed,
            r.io_pages,
            r.io_bytes,
            r.avg_stream_s,
            r.max_stream_s
        )?;
    }
    Ok(())
}

/// Sharing series of every run, one after the other; time restarts at each run.
pub fn write_sharing_csv<'a>(runs: impl IntoIterator<Item = &'a [SharingSample]>, mut w: impl Write) -> io::Result<()> {
    writeln!(w, "{SHARING_HEADER}")?;
    for samples in runs {
        for s in samples {
            writeln!(w, "{},{},{},{},{}", s.time, s.bins[0], s.bins[1], s.bins[2], s.bins[3])?;
        }
    }
    Ok(())
}

pub fn sharing_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".sharing.csv");
    PathBuf::from(s)
}

/// Write `path` and its `.sharing.csv` sibling.
pub fn write_csv_files(path: &Path, runs: &[Metrics]) -> io::Result<()> {
    let records: Vec<RunRecord> = runs.iter().map(Metrics::record).collect();
    let mut main = Vec::new();
    write_csv(&records, &mut main)?;
    fs::write(path, main)?;
    let mut sharing = Vec::new();
    write_sharing_csv(runs.iter().map(|m| m.sharing_samples.as_slice()), &mut sharing)?;
    fs::write(sharing_path(path), sharing)
}

pub fn parse_csv(text: &str) -> Result<Vec<RunRecord>, CsvError> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(CsvError::Header);
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let line_no = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(CsvError::Row { line: line_no, reason: format!("expected 9 fields, got {}", f.len()) });
            }
            let bad = |name: &str| CsvError::Row { line: line_no, reason: format!("bad {name}") };
            Ok(RunRecord {
                policy: f[0].to_string(),
                streams: f[1].parse().map_err(|_| bad("streams"))?,
                pool_frac: f[2].parse().map_err(|_| bad("pool_frac"))?,
                bandwidth_bps: f[3].parse().map_err(|_| bad("bandwidth_bps"))?,
                seed: f[4].parse().map_err(|_| bad("seed"))?,
                io_pages: f[5].parse().map_err(|_| bad("io_pages"))?,
                io_bytes: f[6].parse().map_err(|_| bad("io_bytes"))?,
                avg_stream_s: f[7].parse().map_err(|_| bad("avg_stream_s"))?,
                max_stream_s: f[8].parse().map_err(|_| bad("max_stream_s"))?,
            })
        })
        .collect()
}

pub fn parse_sharing_csv(text: &str) -> Result<Vec<SharingSample>, CsvError> {
    let mut lines = text.lines();
    if lines.next() != Some(SHARING_HEADER) {
        return Err(CsvError::Header);
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let nums: Result<Vec<u64>, _> = line.split(',').map(str::parse).collect();
            match nums.as_deref() {
                Ok(&[time, a, b, c, d]) => Ok(SharingSample { time, bins: [a, b, c, d] }),
                _ => Err(CsvError::Row { line: i + 2, reason: "expected 5 integers".into() }),
            }
        })
        .collect()
}

fn same_point(a: &RunRecord, b: &RunRecord) -> bool {
    a.streams == b.streams && a.pool_frac == b.pool_frac && a.bandwidth_bps == b.bandwidth_bps && a.seed == b.seed
}

/// Text table of every run with io and time ratios against the LRU run of
/// the same configuration.
pub fn summarize(records: &[RunRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>7} {:>9} {:>13} {:>6} {:>10} {:>12} {:>9} {:>10}",
        "policy", "streams", "pool_frac", "bandwidth", "seed", "io_pages", "avg_stream_s", "io/lru", "time/lru"
    );
    let mut missing = false;
    for r in records {
        let base = records.iter().find(|b| b.policy == "lru" && same_point(b, r));
        let (io, time) = match base {
            Some(b) => (
                format!("{:.3}", r.io_pages as f64 / b.io_pages as f64),
                if r.avg_stream_s > 0.0 { format!("{:.3}", r.avg_stream_s / b.avg_stream_s) } else { "-".into() },
            ),
            None => {
                missing = true;
                ("-".into(), "-".into())
            }
        };
        let _ = writeln!(
            out,
            "{:<8} {:>7} {:>9} {:>13} {:>6} {:>10} {:>12.3} {:>9} {:>10}",
            r.policy, r.streams, r.pool_frac, r.bandwidth_bps, r.seed, r.io_pages, r.avg_stream_s, io, time
        );
    }
    if missing {
        out.push_str("note: ratios omitted where no LRU run shares the configuration\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(policy: &str, io: u64, t: f64) -> RunRecord {
        RunRecord {
            policy: policy.into(),
            streams: 8,
            pool_frac: 0.4,
            bandwidth_bps: 75_000_000,
            seed: 1,
            io_pages: io,
            io_bytes: io * 65536,
            avg_stream_s: t,
            max_stream_s: t * 1.5,
        }
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(sharing_histogram([1, 1, 2, 3, 4, 9, 0]), [2, 1, 1, 2]);
        assert_eq!(sharing_histogram([]), [0; 4]);
    }

    #[test]
    fn csv_round_trip() {
        let records = vec![rec("lru", 100, 12.345678901), rec("pbm", 80, 0.1 + 0.2)];
        let mut buf = Vec::new();
        write_csv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(parse_csv(&text).unwrap(), records);
        let mut again = Vec::new();
        write_csv(&records, &mut again).unwrap();
        assert_eq!(buf, again);
        let mut empty = Vec::new();
        write_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), format!("{CSV_HEADER}\n"));
        assert_eq!(parse_csv("nope\n"), Err(CsvError::Header));
        assert!(matches!(parse_csv(&format!("{CSV_HEADER}\nlru,1\n")), Err(CsvError::Row { line: 2, .. })));
    }

    #[test]
    fn sharing_round_trip_and_files() {
        let a = [SharingSample { time: 0, bins: [5, 0, 0, 0] }, SharingSample { time: 10, bins: [1, 2, 3, 4] }];
        let m = Metrics {
            policy: "pbm".into(),
            sharing_samples: a.to_vec(),
            stream_times: vec![2_000_000_000, 4_000_000_000],
            ..Metrics::default()
        };
        assert_eq!(m.avg_stream_s(), 3.0);
        assert_eq!(m.max_stream_s(), 4.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_csv_files(&path, std::slice::from_ref(&m)).unwrap();
        let sharing = fs::read_to_string(dir.path().join("out.csv.sharing.csv")).unwrap();
        assert_eq!(parse_sharing_csv(&sharing).unwrap(), a.to_vec());
        assert_eq!(parse_csv(&fs::read_to_string(&path).unwrap()).unwrap(), vec![m.record()]);
    }

    #[test]
    fn summary_ratios() {
        let s = summarize(&[rec("lru", 100, 10.0), rec("pbm", 80, 5.0)]);
        assert!(s.lines().nth(1).unwrap().contains("1.000"));
        assert!(s.lines().nth(2).unwrap().contains("0.800"));
        assert!(s.lines().nth(2).unwrap().contains("0.500"));
        assert!(!s.contains("note:"));
        let lone = summarize(&[rec("pbm", 80, 5.0)]);
        assert!(lone.contains("note:"));
        let single = summarize(&[rec("lru", 100, 10.0)]);
        assert!(single.lines().nth(1).unwrap().contains("1.000"));
    }
}
