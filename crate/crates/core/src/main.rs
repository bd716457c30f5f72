use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use brite::harness::verify::parse_fault;
use brite::harness::{cmd_compare, cmd_report, cmd_run, cmd_verify, ExperimentConfig, VerifyOptions};

#[derive(Parser)]
#[command(name = "brite", version, about = "Latent-rationale EM experiments on enumerable tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suite; exits nonzero if a hard property fails.
    Verify {
        /// Glob over property names, e.g. `plan*`.
        #[arg(long)]
        filter: Option<String>,
        /// `none` or `flip-token-sign`.
        #[arg(long, default_value = "none")]
        inject_fault: String,
    },
    /// Run one configuration over its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `$BRITE_OUT/<name>`, then `runs/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds replacing the configured ones.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run several configurations on the same task and tabulate them.
    Compare {
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Aggregate the records in a run directory into per-metric series.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load(path: &Path, seeds: &Option<Vec<u64>>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seeds {
        cfg.seeds = s.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify { filter, inject_fault } => {
            let opts = VerifyOptions { fault: parse_fault(&inject_fault)? };
            let report = cmd_verify(filter.as_deref(), &opts)?;
            print!("{}", report.render());
            Ok(ExitCode::from(report.exit_code() as u8))
        }
        Command::Run { config, out, seeds, jobs } => {
            let cfg = load(&config, &seeds)?;
            let dir = cfg.output_dir(out.as_deref());
            let outcome = cmd_run(&cfg, &dir, jobs)?;
            print!("{}", brite::harness::run::summary(&outcome));
            eprintln!("wrote {}", dir.display());
            Ok(if outcome.failed() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Compare { configs, out, seeds, jobs } => {
            let cfgs = configs.iter().map(|c| load(c, &seeds)).collect::<Result<Vec<_>>>()?;
            let cmp = cmd_compare(&cfgs, jobs)?;
            print!("{}", cmp.table);
            if let Some(path) = out {
                std::fs::write(&path, &cmp.table).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { dir } => {
            for path in cmd_report(&dir)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
