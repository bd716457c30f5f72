//! Side-by-side runs of several configurations on one task.

use std::fmt::Write as _;

use super::config::ExperimentConfig;
use super::run::{execute, RunOutcome};
use crate::error::{Error, Result};
use crate::train::RunRecord;

pub const COMPARED: [&str; 4] = ["objective", "acc_greedy", "tv_estep", "samples"];

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseWins {
    pub a: String,
    pub b: String,
    pub metric: &'static str,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub labels: Vec<String>,
    /// `[config][metric][t]`, mean over seeds.
    pub series: Vec<Vec<Vec<f64>>>,
    pub wins: Vec<PairwiseWins>,
    pub table: String,
}

impl Comparison {
    /// Largest `|config_k − config_0|` over every compared metric and row.
    pub fn max_abs_delta(&self) -> f64 {
        let mut m: f64 = 0.0;
        for s in &self.series[1..] {
            for (a, b) in s.iter().zip(&self.series[0]) {
                for (u, v) in a.iter().zip(b) {
                    if !(u.is_nan() && v.is_nan()) {
                        m = m.max((u - v).abs());
                    }
                }
            }
        }
        m
    }
}

fn value(rec: &RunRecord, metric: &str, t: usize) -> f64 {
    let row = &rec.rows[t];
    match metric {
        "samples" => rec.rows[..=t].iter().map(|r| r.samples as f64).sum(),
        other => super::report::metric(row, other),
    }
}

/// Lower is better for estimation error and cost, higher otherwise.
fn higher_is_better(metric: &str) -> bool {
    !matches!(metric, "tv_estep" | "samples")
}

pub fn check_compatible(configs: &[ExperimentConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Err(Error::InvalidConfig { field: "configs".into(), reason: "nothing to compare".into() });
    };
    for c in &configs[1..] {
        if c.task != first.task || c.event != first.event {
            return Err(Error::MismatchedTask(format!("{} and {} use different tasks or events", first.name, c.name)));
        }
        if c.seeds != first.seeds {
            return Err(Error::MismatchedTask(format!("{} and {} use different seeds", first.name, c.name)));
        }
    }
    Ok(())
}

pub fn cmd_compare(configs: &[ExperimentConfig], jobs: Option<usize>) -> Result<Comparison> {
    check_compatible(configs)?;
    let outcomes = configs.iter().map(|c| execute(c, jobs)).collect::<Result<Vec<_>>>()?;
    compare_outcomes(&outcomes)
}

pub fn compare_outcomes(outcomes: &[RunOutcome]) -> Result<Comparison> {
    for o in outcomes {
        if let Some(s) = o.seeds.iter().find(|s| s.error.is_some()) {
            return Err(Error::InvalidConfig {
                field: o.config.name.clone(),
                reason: format!("seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or_default()),
            });
        }
    }
    let labels: Vec<String> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{i}:{}:{}", o.config.name, o.config.algorithm.name()))
        .collect();
    let len = outcomes.iter().flat_map(|o| o.seeds.iter().map(|s| s.record.rows.len())).min().unwrap_or(0);
    let series: Vec<Vec<Vec<f64>>> = outcomes
        .iter()
        .map(|o| {
            COMPARED
                .iter()
                .map(|m| {
                    (0..len)
                        .map(|t| o.seeds.iter().map(|s| value(&s.record, m, t)).sum::<f64>() / o.seeds.len() as f64)
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut wins = Vec::new();
    for i in 0..outcomes.len() {
        for j in i + 1..outcomes.len() {
            for &m in &COMPARED {
                let mut w = PairwiseWins { a: labels[i].clone(), b: labels[j].clone(), metric: m, wins: 0, losses: 0, ties: 0 };
                for (sa, sb) in outcomes[i].seeds.iter().zip(&outcomes[j].seeds) {
                    let last = len - 1;
                    let (va, vb) = (value(&sa.record, m, last), value(&sb.record, m, last));
                    let better = if higher_is_better(m) { va > vb } else { va < vb };
                    let worse = if higher_is_better(m) { va < vb } else { va > vb };
                    if better {
                        w.wins += 1;
                    } else if worse {
                        w.losses += 1;
                    } else {
                        w.ties += 1;
                    }
                }
                wins.push(w);
            }
        }
    }

    let mut table = String::new();
    for l in &labels {
        let _ = writeln!(table, "# {l}");
    }
    let mut header = String::from("t\tmetric");
    for l in &labels {
        let _ = write!(header, "\t{l}");
    }
    for l in &labels[1..] {
        let _ = write!(header, "\tdelta[{l}]");
    }
    let _ = writeln!(table, "{header}");
    for t in 0..len {
        for (k, m) in COMPARED.iter().enumerate() {
            let _ = write!(table, "{t}\t{m}");
            for s in &series {
                let _ = write!(table, "\t{}", s[k][t]);
            }
            for s in &series[1..] {
                let _ = write!(table, "\t{}", s[k][t] - series[0][k][t]);
            }
            table.push('\n');
        }
    }
    let _ = writeln!(table, "\n# final-row wins per seed (win-loss-tie, first vs second)");
    for w in &wins {
        let _ = writeln!(table, "{}\tvs\t{}\t{}\t{}-{}-{}", w.a, w.b, w.metric, w.wins, w.losses, w.ties);
    }
    Ok(Comparison { labels, series, wins, table })
}
