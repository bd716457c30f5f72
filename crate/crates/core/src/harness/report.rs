//! Plot-ready per-metric series aggregated over seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{IterRow, RunRecord};

pub const METRICS: [&str; 7] = ["objective", "kl_step", "kl_to_ref", "tv_estep", "acc_greedy", "acc_sampled", "wall_ms"];

pub fn metric(row: &IterRow, name: &str) -> f64 {
    match name {
        "objective" => row.objective,
        "kl_step" => row.kl_step,
        "kl_to_ref" => row.kl_to_ref,
        "tv_estep" => row.tv_estep,
        "acc_greedy" => row.acc_greedy,
        "acc_sampled" => row.acc_sampled,
        "wall_ms" => row.wall_ms,
        _ => f64::NAN,
    }
}

/// Completed per-seed records in `dir`, sorted by seed.
pub fn load_records(dir: &Path) -> Result<Vec<(u64, RunRecord)>> {
    let missing = |reason: &str| Error::CorruptRecord { path: dir.display().to_string(), reason: reason.into() };
    if !dir.is_dir() {
        return Err(missing("not a directory"));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(seed) = name.strip_prefix("record.seed").and_then(|s| s.strip_suffix(".tsv")) else { continue };
        let seed: u64 = seed.parse().map_err(|_| Error::CorruptRecord {
            path: path.display().to_string(),
            reason: "file name does not carry a seed".into(),
        })?;
        let text = fs::read_to_string(&path)?;
        out.push((seed, RunRecord::from_tsv(&text, &path.display().to_string())?));
    }
    if out.is_empty() {
        return Err(missing("no record tables"));
    }
    out.sort_by_key(|(s, _)| *s);
    Ok(out)
}

/// `(mean, min, max)`; NaN when any value is NaN.
pub fn aggregate(values: &[f64]) -> (f64, f64, f64) {
    if values.iter().any(|v| v.is_nan()) {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

/// One `series.<metric>.tsv` per metric with columns `t mean min max`.
pub fn cmd_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let records = load_records(dir)?;
    let len = records[0].1.rows.len();
    if let Some((seed, _)) = records.iter().find(|(_, r)| r.rows.len() != len) {
        return Err(Error::CorruptRecord {
            path: dir.join(format!("record.seed{seed}.tsv")).display().to_string(),
            reason: format!("row count differs from seed {}", records[0].0),
        });
    }
    let mut written = Vec::new();
    for name in METRICS {
        let mut s = String::from("t\tmean\tmin\tmax\n");
        for t in 0..len {
            let vals: Vec<f64> = records.iter().map(|(_, r)| metric(&r.rows[t], name)).collect();
            let (mean, min, max) = aggregate(&vals);
            let _ = writeln!(s, "{t}\t{mean}\t{min}\t{max}");
        }
        let path = dir.join(format!("series.{name}.tsv"));
        fs::write(&path, s)?;
        written.push(path);
    }
    Ok(written)
}
