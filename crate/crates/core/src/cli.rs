//! Command-line experiment runner: config and flags, sweeps, CSV and summary.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use thiserror::Error;

use crate::metrics::{summarize, write_csv_files, Metrics};
use crate::opt::{opt_replay, opt_replay_with, OptError, Trace};
use crate::sim::{run, RunOutput, SimError};
use crate::storage::StorageError;
use crate::workload::{ConfigError, ExperimentConfig, PolicyKind};

#[derive(Parser, Debug, Default)]
#[command(name = "scanbench", version, about = "Simulate buffer management policies under concurrent scans")]
pub struct Cli {
    /// File of `key = value` settings applied before the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["lru", "pbm", "cscans", "opt-replay", "all"])]
    pub policy: Option<String>,
    #[arg(long)]
    pub streams: Option<usize>,
    #[arg(long)]
    pub pool_frac: Option<f64>,
    /// Bytes per second.
    #[arg(long)]
    pub bandwidth: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Results file; the sharing series goes next to it as `<path>.sharing.csv`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write each run's page reference trace here.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Trace to replay with `--policy opt-replay`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Pool size in frames; overrides `--pool-frac`.
    #[arg(long)]
    pub capacity: Option<usize>,
    /// `key=v1,v2,...`; repeat for a cross product.
    #[arg(long, value_name = "KEY=VALUES")]
    pub sweep: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Sweep points as `(key, value)` assignments, first axis varying slowest.
pub fn expand_sweeps(specs: &[String]) -> Result<Vec<Vec<(String, String)>>, CliError> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for spec in specs {
        let (key, values) =
            spec.split_once('=').ok_or_else(|| CliError::Usage(format!("sweep `{spec}` is not key=v1,v2,...")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(CliError::Usage(format!("sweep `{spec}` needs a key and at least one value")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut p = p.clone();
                    p.push((key.trim().to_string(), v.to_string()));
                    p
                })
            })
            .collect();
    }
    Ok(points)
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::parse(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    let flags = [
        ("streams", cli.streams.map(|v| v.to_string())),
        ("pool_frac", cli.pool_frac.map(|v| v.to_string())),
        ("bandwidth", cli.bandwidth.map(|v| v.to_string())),
        ("seed", cli.seed.map(|v| v.to_string())),
        ("capacity", cli.capacity.map(|v| v.to_string())),
        ("policy", cli.policy.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    Ok(cfg)
}

/// Misses of the offline optimum on the PBM trace, as a result row.
fn opt_row(cfg: &ExperimentConfig, pbm: &RunOutput) -> Result<Metrics, CliError> {
    let tables = cfg.tables()?;
    let mut bytes = 0;
    let mut failed = None;
    let misses = opt_replay_with(&pbm.trace, pbm.capacity, |page| {
        let table = tables.iter().find(|t| t.version() == page.table_version).unwrap_or(&tables[0]);
        match table.bytes_per_page(page.column) {
            Ok(b) => bytes += b,
            Err(e) => failed = Some(e),
        }
    })?;
    if let Some(e) = failed {
        return Err(e.into());
    }
    Ok(Metrics {
        policy: "opt".into(),
        io_pages_loaded: misses,
        io_bytes: bytes,
        stream_times: Vec::new(),
        sharing_samples: Vec::new(),
        ..pbm.metrics.clone()
    })
}

fn write_trace(path: &Path, trace: &Trace) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    trace.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn replay(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let (Some(path), Some(capacity)) = (&cli.trace, cli.capacity) else {
        return Err(CliError::Usage("opt-replay needs --trace and --capacity".into()));
    };
    let trace = Trace::read_from(BufReader::new(File::open(path)?))?;
    let misses = opt_replay(&trace, capacity)?;
    writeln!(
        out,
        "opt misses: {misses} ({} references, {} distinct pages, capacity {capacity})",
        trace.len(),
        trace.distinct_pages()
    )?;
    Ok(())
}

/// Execute what the flags ask for, printing the summary to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    if cli.policy.as_deref() == Some("opt-replay") {
        return replay(cli, out);
    }
    if cli.trace.is_some() {
        return Err(CliError::Usage("--trace is only used with --policy opt-replay".into()));
    }
    let base = base_config(cli)?;
    let mut configs = Vec::new();
    for point in expand_sweeps(&cli.sweep)? {
        let mut cfg = base.clone();
        for (k, v) in &point {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        configs.push(cfg);
    }

    let total: usize = configs.iter().map(|c| c.policies.len()).sum();
    let mut runs = Vec::new();
    let mut traces = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        let with_opt = PolicyKind::ALL.iter().all(|p| cfg.policies.contains(p));
        let mut opt = None;
        for &policy in &cfg.policies {
            let output = run(cfg, policy)?;
            if with_opt && policy == PolicyKind::Pbm {
                opt = Some(opt_row(cfg, &output)?);
            }
            runs.push(output.metrics.clone());
            if cli.trace_out.is_some() {
                traces.push((i, policy, output.trace));
            }
        }
        runs.extend(opt);
    }

    if let Some(path) = &cli.trace_out {
        for (i, policy, trace) in &traces {
            if total == 1 {
                write_trace(path, trace)?;
            } else {
                let mut name = path.as_os_str().to_owned();
                name.push(format!(".{i}.{policy}"));
                write_trace(Path::new(&name), trace)?;
            }
        }
    }
    if let Some(path) = &cli.csv {
        write_csv_files(path, &runs)?;
    }
    let records: Vec<_> = runs.iter().map(Metrics::record).collect();
    write!(out, "{}", summarize(&records))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweeps_cross_product() {
        let pts = expand_sweeps(&["pool-frac=0.1,0.4".into(), "seed=1,2,3".into()]).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec![("pool-frac".into(), "0.1".into()), ("seed".into(), "1".into())]);
        assert_eq!(pts[5], vec![("pool-frac".into(), "0.4".into()), ("seed".into(), "3".into())]);
        assert_eq!(expand_sweeps(&[]).unwrap(), vec![Vec::new()]);
        assert!(matches!(expand_sweeps(&["seed".into()]), Err(CliError::Usage(_))));
        assert!(matches!(expand_sweeps(&["seed=".into()]), Err(CliError::Usage(_))));
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli { streams: Some(3), policy: Some("pbm".into()), ..Cli::default() };
        let cfg = base_config(&cli).unwrap();
        assert_eq!(cfg.workload.streams, 3);
        assert_eq!(cfg.policies, vec![PolicyKind::Pbm]);
        let bad = Cli { policy: Some("opt-replay".into()), ..Cli::default() };
        let err = execute(&bad, &mut Vec::new()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
