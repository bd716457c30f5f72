//! Seeded execution of one configuration and its on-disk layout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use super::config::{Algorithm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::LogitModel;
use crate::task::{Evaluator, GenerativeTask};
use crate::train::baselines::{
    conditional_sft_update, filter_sft_update, greedy_with_tag, restem_update, tag_corpus, Sampling, UpdateOutcome,
};
use crate::train::dpo::{pref_round, softened_task, CandidateSource, PrefLoopConfig};
use crate::train::em::{fit_error, initial_row, step_row};
use crate::train::{reference_gap, reference_optimum, run_brite_with, BriteConfig, IterRow, RefGap, RunRecord};

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Rows completed so far; complete unless `error` is set.
    pub record: RunRecord,
    pub reference: Option<RefGap>,
    pub checkpoints: Vec<(usize, String)>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub task: Arc<GenerativeTask>,
    pub seeds: Vec<SeedOutcome>,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        self.seeds.iter().any(|s| s.error.is_some())
    }
}

/// Build the task and run every seed, in parallel over seeds on `jobs`
/// threads (all cores when `None`).
pub fn execute(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<RunOutcome> {
    cfg.validate()?;
    let task = Arc::new(cfg.task.build()?);
    let run = || cfg.seeds.par_iter().map(|&s| execute_seed(cfg, &task, s)).collect::<Vec<_>>();
    let seeds = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig { field: "jobs".into(), reason: e.to_string() })?
            .install(run),
        None => run(),
    };
    Ok(RunOutcome { config: cfg.clone(), task, seeds })
}

pub fn initial_model(cfg: &ExperimentConfig, task: &Arc<GenerativeTask>, seed: u64) -> Result<LogitModel> {
    if cfg.model.init_scale == 0.0 {
        LogitModel::zeros(task.clone(), cfg.model.features.clone())
    } else {
        LogitModel::random(task.clone(), cfg.model.features.clone(), cfg.model.init_scale, seed)
    }
}

pub fn execute_seed(cfg: &ExperimentConfig, task: &Arc<GenerativeTask>, seed: u64) -> SeedOutcome {
    let mut out = SeedOutcome { seed, record: RunRecord::default(), reference: None, checkpoints: Vec::new(), error: None };
    if let Err(e) = drive(cfg, task, seed, &mut out) {
        out.error = Some(e.to_string());
    }
    out
}

fn keep_checkpoint(cfg: &ExperimentConfig, out: &mut SeedOutcome, model: &LogitModel, t: usize) {
    if cfg.checkpoint_every > 0 && t.is_multiple_of(cfg.checkpoint_every) {
        out.checkpoints.push((t, model.to_checkpoint()));
    }
}

fn top_tag_accuracy(model: &LogitModel) -> f64 {
    let task = model.task();
    let top = task.num_latents() - 1;
    (0..task.num_prompts())
        .filter(|&x| greedy_with_tag(model, x, top).is_ok_and(|y| task.is_correct_answer(x, y)))
        .map(|x| task.prompt(x).weight)
        .sum()
}

fn drive(cfg: &ExperimentConfig, task: &Arc<GenerativeTask>, seed: u64, out: &mut SeedOutcome) -> Result<()> {
    let m0 = initial_model(cfg, task, seed)?;
    let ev = &cfg.event;
    if cfg.algorithm == Algorithm::Brite {
        let bc = BriteConfig {
            iterations: cfg.iterations,
            estep: cfg.estep.clone(),
            mstep: cfg.mstep.clone(),
            posterior_samples: cfg.posterior_samples,
            timing: cfg.timing,
        };
        let refm = match &cfg.reference {
            Some(r) => Some(reference_optimum(&m0, ev, r.steps, r.rate)?),
            None => None,
        };
        out.record.rows.push(initial_row(&m0, ev, refm.as_ref())?);
        let mut rows = Vec::new();
        let mut ckpts = Vec::new();
        let res = run_brite_with(&m0, ev, &bc, seed, refm.as_ref(), refm.is_some(), |m, row| {
            rows.push(row.clone());
            if cfg.checkpoint_every > 0 && row.t % cfg.checkpoint_every == 0 {
                ckpts.push((row.t, m.to_checkpoint()));
            }
            Ok(())
        });
        out.record.rows.extend(rows);
        out.checkpoints = ckpts;
        let run = res?;
        if let Some(r) = &refm {
            out.reference = Some(reference_gap(&m0, &run.record, &run.history, r, ev)?);
        }
        return Ok(());
    }

    let mut row0 = initial_row(&m0, ev, None)?;
    if cfg.algorithm == Algorithm::CondSft {
        row0.acc_greedy = top_tag_accuracy(&m0);
    }
    out.record.rows.push(row0);
    let pref = PrefLoopConfig {
        iterations: cfg.iterations,
        candidates: cfg.budget,
        source: if cfg.algorithm == Algorithm::BriteDpo {
            CandidateSource::PosteriorSample { penalty: cfg.dpo.penalty }
        } else {
            CandidateSource::ModelSample
        },
        beta: cfg.beta,
        steps: cfg.dpo.steps,
        rate: cfg.dpo.rate,
    };
    let soft = match cfg.algorithm {
        Algorithm::IterativeDpo | Algorithm::BriteDpo => {
            pref.validate()?;
            softened_task(task, &pref.source)?
        }
        _ => None,
    };
    let mut cur = m0;
    for t in 1..=cfg.iterations {
        let start = std::time::Instant::now();
        let tu = t as u64;
        let (next, fits, samples, skipped) = match cfg.algorithm {
            Algorithm::FilterSft => {
                unpack(filter_sft_update(&cur, ev, Sampling::Budget(cfg.budget), &cfg.mstep, seed, tu)?)
            }
            Algorithm::Restem => {
                if !matches!(task.evaluator(), Evaluator::SoftReward { .. }) {
                    return Err(Error::RequiresSoftReward("restem"));
                }
                let reward = |x, z, y| task.soft_reward(x, z, y).unwrap_or(0.0);
                unpack(restem_update(&cur, &reward, cfg.beta, Sampling::Budget(cfg.budget), &cfg.mstep, seed, tu)?)
            }
            Algorithm::CondSft => {
                let top = task.num_latents() - 1;
                let corpus = tag_corpus(&cur, cfg.budget, seed, tu, |x, y| if task.is_correct_answer(x, y) { top } else { 0 })?;
                unpack(conditional_sft_update(&cur, &corpus, &cfg.mstep)?)
            }
            Algorithm::IterativeDpo | Algorithm::BriteDpo => {
                let (next, row) = pref_round(&cur, ev, &pref, soft.as_ref(), seed, t)?;
                (next, None, cfg.budget * task.num_prompts(), row.skipped)
            }
            Algorithm::Brite => unreachable!(),
        };
        let mut row: IterRow = step_row(&cur, &next, ev, t, None)?;
        if let Some(fits) = fits {
            row.tv_estep = fit_error(&cur, ev, &fits)?;
        }
        if cfg.algorithm == Algorithm::CondSft {
            row.acc_greedy = top_tag_accuracy(&next);
        }
        row.samples = samples;
        row.skipped = skipped;
        row.wall_ms = if cfg.timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        out.record.rows.push(row);
        keep_checkpoint(cfg, out, &next, t);
        cur = next;
    }
    Ok(())
}

type Step = (LogitModel, Option<Vec<Option<Vec<f64>>>>, usize, usize);

fn unpack(u: UpdateOutcome) -> Step {
    (u.model, Some(u.posteriors), u.samples, u.skipped)
}

pub fn record_file(seed: u64) -> String {
    format!("record.seed{seed}.tsv")
}

/// Marker written when any seed failed; partial tables end in `.partial`.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

fn clear_previous(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let ours = name.starts_with("record.seed")
            || name.starts_with("checkpoint.")
            || name.starts_with("series.")
            || name == "summary.txt"
            || name == "config.resolved"
            || name == INCOMPLETE_MARKER;
        if ours && path.is_file() {
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

/// Run `cfg` and write `config.resolved`, `record.seed<k>.tsv`,
/// `checkpoint.seed<k>.t<j>` and `summary.txt` into `dir`.
pub fn cmd_run(cfg: &ExperimentConfig, dir: &Path, jobs: Option<usize>) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    clear_previous(dir)?;
    fs::write(dir.join("config.resolved"), cfg.to_toml()?)?;
    let outcome = execute(cfg, jobs)?;
    write_outputs(&outcome, dir)?;
    Ok(outcome)
}

pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for s in &outcome.seeds {
        let mut name = record_file(s.seed);
        if s.error.is_some() {
            name.push_str(".partial");
        }
        let path = dir.join(name);
        fs::write(&path, s.record.to_tsv())?;
        written.push(path);
        for (t, text) in &s.checkpoints {
            let path = dir.join(format!("checkpoint.seed{}.t{t}", s.seed));
            fs::write(&path, text)?;
            written.push(path);
        }
    }
    if outcome.failed() {
        let failed: Vec<String> = outcome.seeds.iter().filter(|s| s.error.is_some()).map(|s| s.seed.to_string()).collect();
        fs::write(dir.join(INCOMPLETE_MARKER), format!("failed seeds: {}\n", failed.join(" ")))?;
    }
    let path = dir.join("summary.txt");
    fs::write(&path, summary(outcome))?;
    written.push(path);
    Ok(written)
}

pub fn summary(outcome: &RunOutcome) -> String {
    let cfg = &outcome.config;
    let t = &outcome.task;
    let mut s = String::new();
    let _ = writeln!(s, "name: {}", cfg.name);
    let _ = writeln!(s, "algorithm: {}", cfg.algorithm.name());
    let _ = writeln!(s, "task: {} ({} prompts, {} pairs)", t.name(), t.num_prompts(), t.num_pairs());
    let _ = writeln!(s, "estep: {}", cfg.estep.name());
    let _ = writeln!(s, "iterations: {}", cfg.iterations);
    let _ = writeln!(s, "status: {}", if outcome.failed() { "INCOMPLETE" } else { "complete" });
    for seed in &outcome.seeds {
        let _ = writeln!(s, "\n[seed {}]", seed.seed);
        if let Some(e) = &seed.error {
            let _ = writeln!(s, "error: {e}");
            let _ = writeln!(s, "rows written: {}", seed.record.rows.len());
        }
        let (Some(first), Some(last)) = (seed.record.rows.first(), seed.record.rows.last()) else { continue };
        let _ = writeln!(s, "objective: {} -> {}", first.objective, last.objective);
        let _ = writeln!(s, "acc_greedy: {} -> {}", first.acc_greedy, last.acc_greedy);
        let _ = writeln!(s, "acc_sampled: {} -> {}", first.acc_sampled, last.acc_sampled);
        let _ = writeln!(s, "monotone violations: {:?}", seed.record.monotone_violations());
        let _ = writeln!(s, "step bound violations: {:?}", seed.record.step_bound_violations());
        if let Some(c) = seed.record.certificate() {
            let _ = writeln!(s, "certificate: min_kl {} <= bound {}: {}", c.min_kl, c.bound, c.holds);
        }
        if let Some(g) = &seed.reference {
            let probe = if g.concavity_failures.is_empty() { "passes" } else { "fails" };
            let verdict = if g.concavity_failures.is_empty() {
                if g.bound_holds { "holds" } else { "VIOLATED" }
            } else {
                "informational"
            };
            let _ = writeln!(
                s,
                "reference gap: min {} vs bound {} ({verdict}); concavity probe {probe} {:?}",
                g.min_gap, g.bound, g.concavity_failures
            );
        }
    }
    s
}
