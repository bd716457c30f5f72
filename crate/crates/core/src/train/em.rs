//! The alternating E/M loop and its per-iteration record.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mstep::{mstep, MStepSpec};
use crate::error::{Error, Result};
use crate::estep::{run_estep_all, EStepBackend};
use crate::graph::JointModel;
use crate::math;
use crate::model::LogitModel;
use crate::rng;
use crate::task::EventSpec;

/// Tolerance for "ℒ never decreases".
pub const MONOTONE_TOL: f64 = 1e-12;
/// Tolerance for `ℒ_{t+1} − ℒ_t ≥ KL(P_{t+1} ‖ P_t)`.
pub const STEP_BOUND_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BriteConfig {
    pub iterations: usize,
    pub estep: EStepBackend,
    pub mstep: MStepSpec,
    /// Fit `N` draws from each posterior instead of the posterior itself.
    #[serde(default)]
    pub posterior_samples: Option<usize>,
    /// Record wall-clock time per iteration; otherwise `wall_ms` is 0.
    #[serde(default)]
    pub timing: bool,
}

impl BriteConfig {
    pub fn exact(iterations: usize, mstep: MStepSpec) -> Self {
        BriteConfig { iterations, estep: EStepBackend::Exact, mstep, posterior_samples: None, timing: false }
    }

    pub fn validate(&self) -> Result<()> {
        self.mstep.validate()?;
        if let EStepBackend::PolicyGradient(cfg) = &self.estep {
            cfg.validate()?;
        }
        if let EStepBackend::Planning { beta } = &self.estep {
            if !(*beta > 0.0) {
                return Err(Error::InvalidConfig { field: "estep.beta".into(), reason: "must be > 0".into() });
            }
        }
        if self.posterior_samples == Some(0) {
            return Err(Error::InvalidConfig { field: "posterior_samples".into(), reason: "must be >= 1".into() });
        }
        Ok(())
    }
}

/// One row of a run record. Row 0 describes the initial model; its step
/// columns are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRow {
    pub t: usize,
    pub objective: f64,
    pub per_prompt: Vec<f64>,
    pub kl_step: f64,
    pub kl_to_ref: f64,
    pub tv_estep: f64,
    pub acc_greedy: f64,
    pub acc_sampled: f64,
    pub samples: usize,
    pub skipped: usize,
    pub wall_ms: f64,
}

pub const TSV_HEADER: &str = "t\tobjective\tkl_step\tkl_to_ref\ttv_estep\tacc_greedy\tacc_sampled\twall_ms";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Certificate {
    pub min_kl: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<IterRow>,
}

impl RunRecord {
    pub fn objectives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.objective).collect()
    }

    pub fn last(&self) -> &IterRow {
        self.rows.last().expect("record has an initial row")
    }

    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    /// Iterations `t` with `ℒ_t < ℒ_{t−1} − tol`.
    pub fn monotone_violations(&self) -> Vec<usize> {
        self.rows.windows(2).filter(|w| w[1].objective < w[0].objective - MONOTONE_TOL).map(|w| w[1].t).collect()
    }

    /// Iterations `t` with `ℒ_t − ℒ_{t−1} < KL(P_t ‖ P_{t−1}) − tol`.
    pub fn step_bound_violations(&self) -> Vec<usize> {
        self.rows
            .windows(2)
            .filter(|w| w[1].objective - w[0].objective < w[1].kl_step - STEP_BOUND_TOL)
            .map(|w| w[1].t)
            .collect()
    }

    /// `min_t KL(P_t ‖ P_{t−1}) ≤ (ℒ_T − ℒ_0) / T`; `None` before the first iteration.
    pub fn certificate(&self) -> Option<Certificate> {
        let t = self.iterations();
        if t == 0 {
            return None;
        }
        let min_kl = self.rows[1..].iter().map(|r| r.kl_step).fold(f64::INFINITY, f64::min);
        let bound = (self.last().objective - self.rows[0].objective) / t as f64;
        Some(Certificate { min_kl, bound, holds: min_kl <= bound + STEP_BOUND_TOL })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(TSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.t, r.objective, r.kl_step, r.kl_to_ref, r.tv_estep, r.acc_greedy, r.acc_sampled, r.wall_ms
            );
        }
        s
    }

    /// Parse the columns written by [`RunRecord::to_tsv`]. Per-prompt values
    /// and sample counts are not stored and come back empty.
    pub fn from_tsv(text: &str, path: &str) -> Result<RunRecord> {
        let corrupt = |reason: String| Error::CorruptRecord { path: path.to_string(), reason };
        let mut lines = text.lines();
        if lines.next() != Some(TSV_HEADER) {
            return Err(corrupt("missing or unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(corrupt(format!("line {}: expected 8 fields, got {}", i + 2, f.len())));
            }
            let num = |k: usize| -> Result<f64> {
                f[k].parse::<f64>().map_err(|_| corrupt(format!("line {}: bad number {:?}", i + 2, f[k])))
            };
            let t = f[0].parse::<usize>().map_err(|_| corrupt(format!("line {}: bad iteration {:?}", i + 2, f[0])))?;
            if t != rows.len() {
                return Err(corrupt(format!("line {}: iteration {t} out of order", i + 2)));
            }
            rows.push(IterRow {
                t,
                objective: num(1)?,
                per_prompt: Vec::new(),
                kl_step: num(2)?,
                kl_to_ref: num(3)?,
                tv_estep: num(4)?,
                acc_greedy: num(5)?,
                acc_sampled: num(6)?,
                samples: 0,
                skipped: 0,
                wall_ms: num(7)?,
            });
        }
        if rows.is_empty() {
            return Err(corrupt("no rows".into()));
        }
        Ok(RunRecord { rows })
    }
}

/// ρ-weighted fraction of prompts whose greedy decode has the gold answer.
pub fn greedy_accuracy(model: &LogitModel) -> f64 {
    let t = model.task();
    (0..t.num_prompts())
        .map(|x| {
            let (_, y) = t.split_pair(model.greedy(x));
            if t.is_correct_answer(x, y) {
                t.prompt(x).weight
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .min(1.0)
}

/// ρ-weighted probability that a model draw has the gold answer.
pub fn sampled_accuracy(model: &LogitModel) -> f64 {
    let t = model.task();
    let mut acc = 0.0;
    for x in 0..t.num_prompts() {
        let p = model.probs(x);
        let gold = t.prompt(x).gold_response;
        let m: f64 = (0..t.num_latents()).map(|z| p[t.pair_index(z, gold)]).sum();
        acc += t.prompt(x).weight * m;
    }
    acc.min(1.0)
}

fn per_prompt_objective(model: &LogitModel, event: &EventSpec) -> Result<Vec<f64>> {
    let j = JointModel::new(model);
    (0..model.task().num_prompts()).map(|x| j.event_logprob(x, event)).collect()
}

fn weighted_total(model: &LogitModel, per_prompt: &[f64]) -> f64 {
    let t = model.task();
    per_prompt.iter().enumerate().filter(|(x, _)| t.prompt(*x).weight > 0.0).map(|(x, v)| t.prompt(x).weight * v).sum()
}

/// Row for the initial model.
pub fn initial_row(model: &LogitModel, event: &EventSpec, reference: Option<&LogitModel>) -> Result<IterRow> {
    let per_prompt = per_prompt_objective(model, event)?;
    Ok(IterRow {
        t: 0,
        objective: weighted_total(model, &per_prompt),
        per_prompt,
        kl_step: f64::NAN,
        kl_to_ref: match reference {
            Some(r) => LogitModel::mean_kl(model, r)?,
            None => f64::NAN,
        },
        tv_estep: f64::NAN,
        acc_greedy: greedy_accuracy(model),
        acc_sampled: sampled_accuracy(model),
        samples: 0,
        skipped: 0,
        wall_ms: 0.0,
    })
}

/// Row for `new` after iteration `t` from `old`. E-step, sample and timing
/// columns are left at NaN / 0 for the caller to fill in.
pub fn step_row(
    old: &LogitModel,
    new: &LogitModel,
    event: &EventSpec,
    t: usize,
    reference: Option<&LogitModel>,
) -> Result<IterRow> {
    let mut row = initial_row(new, event, reference)?;
    row.t = t;
    row.kl_step = LogitModel::mean_kl(new, old)?;
    Ok(row)
}

/// ρ-weighted TV between per-prompt fitting distributions and exact
/// posteriors; a missing distribution counts as 1.
pub fn fit_error(model: &LogitModel, event: &EventSpec, fits: &[Option<Vec<f64>>]) -> Result<f64> {
    let task = model.task();
    let j = JointModel::new(model);
    let mut acc = 0.0;
    for (x, q) in fits.iter().enumerate() {
        let tv = match (q, j.exact_posterior(x, event)) {
            (Some(q), Ok(p)) => math::total_variation(q, &p.pair_marginal(task)),
            (None, Err(Error::ZeroMassEvent { .. })) => 0.0,
            (_, Err(Error::ZeroMassEvent { .. })) | (None, Ok(_)) => 1.0,
            (_, Err(e)) => return Err(e),
        };
        acc += task.prompt(x).weight * tv;
    }
    Ok(acc)
}

/// One E-step over all prompts followed by one M-step. Iteration `t` is
/// 1-based and selects the random streams.
pub fn brite_iterate(
    model: &LogitModel,
    event: &EventSpec,
    cfg: &BriteConfig,
    seed: u64,
    t: usize,
    reference: Option<&LogitModel>,
) -> Result<(LogitModel, IterRow)> {
    let start = Instant::now();
    let task = model.task();
    let results = run_estep_all(model, event, &cfg.estep, seed, t as u64)?;
    let mut samples: usize = results.iter().map(|r| r.samples_used).sum();
    let tv_estep: f64 = results.iter().map(|r| task.prompt(r.prompt).weight * r.tv_error).sum();
    let mut posteriors: Vec<Option<Vec<f64>>> = results.into_iter().map(|r| r.posterior).collect();
    if let Some(n) = cfg.posterior_samples {
        for (x, q) in posteriors.iter_mut().enumerate() {
            if let Some(q) = q {
                *q = empirical(q, n, &mut rng::stream(seed, "posterior_sample", &[x as u64, t as u64]));
                samples += n;
            }
        }
    }
    let skipped = posteriors.iter().filter(|q| q.is_none()).count();
    let new = mstep(model, &posteriors, &cfg.mstep)?;
    let mut row = step_row(model, &new, event, t, reference)?;
    row.tv_estep = tv_estep;
    row.samples = samples;
    row.skipped = skipped;
    row.wall_ms = if cfg.timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    Ok((new, row))
}

/// Normalized counts of `n` draws from `q`.
pub fn empirical(q: &[f64], n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(q.len());
    let mut acc = 0.0;
    for &p in q {
        acc += p;
        cdf.push(acc);
    }
    let mut counts = vec![0.0; q.len()];
    for _ in 0..n {
        let u = rng.gen::<f64>() * acc;
        let i = cdf.partition_point(|&c| c <= u).min(q.len() - 1);
        counts[i] += 1.0;
    }
    counts.iter_mut().for_each(|c| *c /= n as f64);
    counts
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: LogitModel,
    pub record: RunRecord,
    /// Weights of `θ_0 … θ_T` when history was requested.
    pub history: Vec<Vec<f64>>,
}

/// Run `cfg.iterations` iterations from `model`. `on_iter` sees every new
/// model and row, for checkpointing.
pub fn run_brite_with(
    model: &LogitModel,
    event: &EventSpec,
    cfg: &BriteConfig,
    seed: u64,
    reference: Option<&LogitModel>,
    keep_history: bool,
    mut on_iter: impl FnMut(&LogitModel, &IterRow) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut cur = model.clone();
    let mut record = RunRecord { rows: vec![initial_row(&cur, event, reference)?] };
    let mut history = Vec::new();
    if keep_history {
        history.push(cur.weights().to_vec());
    }
    for t in 1..=cfg.iterations {
        let (next, row) = brite_iterate(&cur, event, cfg, seed, t, reference)?;
        on_iter(&next, &row)?;
        record.rows.push(row);
        if keep_history {
            history.push(next.weights().to_vec());
        }
        cur = next;
    }
    Ok(RunOutput { model: cur, record, history })
}

pub fn run_brite(model: &LogitModel, event: &EventSpec, cfg: &BriteConfig, seed: u64) -> Result<RunOutput> {
    run_brite_with(model, event, cfg, seed, None, false, |_, _| Ok(()))
}

/// Long exact-gradient ascent on `ℒ` with backtracking, used as a stand-in
/// for the maximizer.
pub fn reference_optimum(model: &LogitModel, event: &EventSpec, steps: usize, rate: f64) -> Result<LogitModel> {
    let mut cur = model.clone();
    let mut obj = JointModel::new(&cur).objective(event)?;
    let mut eta = rate;
    for _ in 0..steps {
        let g = JointModel::new(&cur).objective_gradient(event)?;
        if math::max_abs(&g) < 1e-14 {
            break;
        }
        let mut moved = false;
        for _ in 0..60 {
            let w: Vec<f64> = cur.weights().iter().zip(&g).map(|(w, g)| w + eta * g).collect();
            let cand = cur.with_weights(w);
            let o = JointModel::new(&cand).objective(event)?;
            if o >= obj {
                cur = cand;
                obj = o;
                eta *= 1.5;
                moved = true;
                break;
            }
            eta *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(cur)
}

/// Comparison of a run against a reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct RefGap {
    pub reference_objective: f64,
    /// `min_{1 ≤ t ≤ T} ℒ_ref − ℒ_t`.
    pub min_gap: f64,
    /// `KL(P_0 ‖ P_ref) / T`.
    pub bound: f64,
    pub bound_holds: bool,
    /// Iterations where `⟨∇ℒ(θ_t), θ_ref − θ_t⟩ < ℒ_ref − ℒ_t`.
    pub concavity_failures: Vec<usize>,
}

pub fn reference_gap(
    initial: &LogitModel,
    record: &RunRecord,
    history: &[Vec<f64>],
    reference: &LogitModel,
    event: &EventSpec,
) -> Result<RefGap> {
    let t = record.iterations();
    if t == 0 || history.len() != record.rows.len() {
        return Err(Error::InvalidConfig {
            field: "history".into(),
            reason: "needs at least one iteration with history kept".into(),
        });
    }
    let reference_objective = JointModel::new(reference).objective(event)?;
    let min_gap = record.rows[1..].iter().map(|r| reference_objective - r.objective).fold(f64::INFINITY, f64::min);
    let bound = LogitModel::mean_kl(initial, reference)? / t as f64;
    let mut concavity_failures = Vec::new();
    for (row, w) in record.rows.iter().zip(history) {
        let m = initial.with_weights(w.clone());
        let g = JointModel::new(&m).objective_gradient(event)?;
        let d: Vec<f64> = reference.weights().iter().zip(w).map(|(a, b)| a - b).collect();
        let lhs = math::dot(&g, &d);
        let rhs = reference_objective - row.objective;
        if lhs < rhs - 1e-9 * (1.0 + rhs.abs()) {
            concavity_failures.push(row.t);
        }
    }
    Ok(RefGap {
        reference_objective,
        min_gap,
        bound,
        bound_holds: min_gap <= bound + 1e-6,
        concavity_failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FeatureKind;
    use crate::task::{random_task, EvaluatorSpec, GenerativeTask, TaskKind, TaskSpec};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn carry(d: usize, b: usize) -> Arc<GenerativeTask> {
        Arc::new(
            TaskSpec::new(TaskKind::CarryAddition { digits: d, base: b }, 0, EvaluatorSpec::default())
                .build()
                .unwrap(),
        )
    }

    #[test]
    fn tabular_hard_verifier_solves_in_one_iteration() {
        let t = carry(1, 3);
        let m = LogitModel::zeros(t.clone(), FeatureKind::Tabular).unwrap();
        let out = run_brite(&m, &EventSpec::accepted(), &BriteConfig::exact(1, MStepSpec::ClosedForm), 0).unwrap();
        assert_eq!(out.record.rows.len(), 2);
        assert_eq!(out.record.last().objective, 0.0);
        assert!((out.record.last().acc_greedy - 1.0).abs() < 1e-12);
        assert!(out.record.certificate().unwrap().holds);
    }

    #[test]
    fn zero_iterations_leave_initial_row_only() {
        let t = carry(1, 2);
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 3).unwrap();
        let out = run_brite(&m, &EventSpec::accepted(), &BriteConfig::exact(0, MStepSpec::ClosedForm), 0).unwrap();
        assert_eq!(out.record.rows.len(), 1);
        assert!(out.record.certificate().is_none());
        assert_eq!(out.model.weights(), m.weights());
    }

    #[test]
    fn tsv_round_trip() {
        let t = carry(1, 2);
        let m = LogitModel::random(t, FeatureKind::Factored, 1.0, 3).unwrap();
        let cfg = BriteConfig::exact(3, MStepSpec::GradientAscent { steps: 5, rate: 1.0 });
        let out = run_brite(&m, &EventSpec::gold_answer(), &cfg, 0).unwrap();
        let text = out.record.to_tsv();
        let back = RunRecord::from_tsv(&text, "mem").unwrap();
        assert_eq!(back.to_tsv(), text);
        assert!(RunRecord::from_tsv("t\tobjective\n1\t2\n", "bad").is_err());
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect::<String>() + "2\t0.5\n";
        assert!(matches!(RunRecord::from_tsv(&truncated, "x"), Err(Error::CorruptRecord { .. })));
    }

    #[test]
    fn planning_and_exact_runs_agree() {
        let t = carry(1, 3);
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 5).unwrap();
        let ev = EventSpec::gold_answer();
        let a = run_brite(&m, &ev, &BriteConfig::exact(3, MStepSpec::ClosedForm), 0).unwrap();
        let mut cfg = BriteConfig::exact(3, MStepSpec::ClosedForm);
        cfg.estep = EStepBackend::Planning { beta: 1.0 };
        let b = run_brite(&m, &ev, &cfg, 0).unwrap();
        for (ra, rb) in a.record.rows.iter().zip(&b.record.rows) {
            assert!((ra.objective - rb.objective).abs() < 1e-9);
        }
    }

    #[test]
    fn empirical_counts_sum_to_one() {
        let q = [0.2, 0.0, 0.8];
        let e = empirical(&q, 1000, &mut rng::stream(1, "t", &[]));
        assert_eq!(e[1], 0.0);
        assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((e[2] - 0.8).abs() < 0.05);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn exact_runs_are_monotone_with_certificate(
            seed in any::<u64>(),
            tabular in any::<bool>(),
            soft in any::<bool>(),
        ) {
            let ev_spec = if soft {
                EvaluatorSpec::RandomSoft { beta: 1.0, scale: 3.0 }
            } else {
                EvaluatorSpec::RandomHard { accept_prob: 0.4 }
            };
            let t = Arc::new(random_task(3, 4, 3, seed, ev_spec).unwrap());
            let (kind, ms) = if tabular {
                (FeatureKind::Tabular, MStepSpec::ClosedForm)
            } else {
                (FeatureKind::Random { dim: 4, seed }, MStepSpec::GradientAscent { steps: 10, rate: 1.0 })
            };
            let m = LogitModel::random(t, kind, 1.0, seed).unwrap();
            let out = run_brite(&m, &EventSpec::accepted(), &BriteConfig::exact(15, ms), seed).unwrap();
            prop_assert!(out.record.monotone_violations().is_empty());
            prop_assert!(out.record.certificate().unwrap().holds);
            if tabular {
                prop_assert!(out.record.step_bound_violations().is_empty());
            }
        }
    }
}
