//! Posterior approximation backends for the E-step.
//!
//! Each backend returns a distribution over the pairs of one prompt together
//! with its total-variation distance to the exact posterior. Sampled backends
//! draw from a stream keyed by `(seed, backend, prompt, iteration)`.

use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::JointModel;
use crate::math::{self, LOG_ZERO};
use crate::model::LogitModel;
use crate::planner::{self, ShapedMdp, ShapingFault};
use crate::rng::{self, Stream};
use crate::task::EventSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Leave-one-out mean of the batch returns.
    #[default]
    MeanReturn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyGradConfig {
    pub step_size: f64,
    /// Trajectories per update; `0` uses the exact gradient by enumeration.
    #[serde(default)]
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub baseline: Baseline,
    /// Divide advantages by the batch standard deviation.
    #[serde(default = "yes")]
    pub normalize_advantage: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for PolicyGradConfig {
    fn default() -> Self {
        PolicyGradConfig {
            step_size: 0.1,
            batch_size: 16,
            iterations: 5000,
            beta: 1.0,
            baseline: Baseline::MeanReturn,
            normalize_advantage: true,
        }
    }
}

impl PolicyGradConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig { field: "step_size".into(), reason: "must be > 0".into() });
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig { field: "beta".into(), reason: "must be > 0".into() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EStepBackend {
    Exact,
    Planning {
        #[serde(default = "one")]
        beta: f64,
    },
    PolicyGradient(PolicyGradConfig),
    Rejection { budget: usize },
}

impl EStepBackend {
    pub fn name(&self) -> &'static str {
        match self {
            EStepBackend::Exact => "exact",
            EStepBackend::Planning { .. } => "planning",
            EStepBackend::PolicyGradient(_) => "policy_gradient",
            EStepBackend::Rejection { .. } => "rejection",
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, EStepBackend::Exact)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EStepResult {
    pub prompt: usize,
    pub backend: &'static str,
    /// Dense distribution over pair indices; `None` when nothing was accepted.
    pub posterior: Option<Vec<f64>>,
    /// TV to the exact posterior; `1.0` when no posterior was produced.
    pub tv_error: f64,
    pub samples_used: usize,
    pub acceptance_rate: Option<f64>,
    /// Final regularized return of a trained sampler.
    pub objective: Option<f64>,
    pub wall_time: Duration,
}

impl EStepResult {
    pub fn zero_acceptance(&self) -> bool {
        self.posterior.is_none()
    }

    /// Tab-separated `(prompt, backend, tv_error, samples_used, acceptance_rate, wall_ms)`.
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{}\t{}\t{}",
            self.prompt,
            self.backend,
            self.tv_error,
            self.samples_used,
            self.acceptance_rate.map_or("-".into(), |a| format!("{a:.6e}")),
            self.wall_time.as_millis()
        )
    }
}

fn oracle_posterior(model: &LogitModel, x: usize, event: &EventSpec) -> Option<Vec<f64>> {
    JointModel::new(model)
        .exact_posterior(x, event)
        .ok()
        .map(|p| p.pair_marginal(model.task()))
}

fn finish(
    model: &LogitModel,
    x: usize,
    event: &EventSpec,
    backend: &'static str,
    posterior: Option<Vec<f64>>,
    start: Instant,
) -> EStepResult {
    let tv_error = match (&posterior, oracle_posterior(model, x, event)) {
        (Some(p), Some(q)) => math::total_variation(p, &q).clamp(0.0, 1.0),
        _ => 1.0,
    };
    EStepResult {
        prompt: x,
        backend,
        posterior,
        tv_error,
        samples_used: 0,
        acceptance_rate: None,
        objective: None,
        wall_time: start.elapsed(),
    }
}

pub fn estep_exact(model: &LogitModel, x: usize, event: &EventSpec) -> Result<EStepResult> {
    let start = Instant::now();
    let q = JointModel::new(model).exact_posterior(x, event)?.pair_marginal(model.task());
    let mut r = finish(model, x, event, "exact", None, start);
    r.posterior = Some(q);
    r.tv_error = 0.0;
    Ok(r)
}

/// Soft planning on shaped rewards. `beta` other than 1 is a diagnostic: the
/// plan then no longer reproduces the posterior.
pub fn estep_planning(model: &LogitModel, x: usize, event: &EventSpec, beta: f64) -> Result<EStepResult> {
    estep_planning_with(model, x, event, beta, ShapingFault::None)
}

pub fn estep_planning_with(
    model: &LogitModel,
    x: usize,
    event: &EventSpec,
    beta: f64,
    fault: ShapingFault,
) -> Result<EStepResult> {
    let start = Instant::now();
    let mdp = planner::shape_rewards_with(model, x, event, fault)?.with_beta(beta)?;
    let plan = planner::soft_value_iteration(&mdp)?;
    let dist = planner::leaf_distribution(&plan);
    check_clamp(&mdp, &dist)?;
    let mut r = finish(model, x, event, "planning", Some(dist), start);
    r.objective = Some(plan.root_value());
    Ok(r)
}

fn check_clamp(mdp: &ShapedMdp, dist: &[f64]) -> Result<()> {
    for (p, &c) in dist.iter().zip(&mdp.clamped) {
        if c && *p > 1e-300 {
            return Err(Error::ClampLeak { prob: *p });
        }
    }
    Ok(())
}

/// Tabular softmax policy over the children of every tree state.
#[derive(Clone, Debug)]
struct TreePolicy {
    logits: Vec<f64>,
}

impl TreePolicy {
    fn log_policy(&self, mdp: &ShapedMdp) -> Vec<f64> {
        let mut lp = vec![0.0; mdp.tree.len()];
        let mut buf = Vec::new();
        for n in mdp.tree.nodes() {
            if n.children.is_empty() {
                continue;
            }
            buf.clear();
            buf.extend(n.children.iter().map(|&c| self.logits[c]));
            let lse = math::logsumexp(&buf);
            for &c in &n.children {
                lp[c] = self.logits[c] - lse;
            }
        }
        lp
    }
}

/// Exact return `J` of the start state, soft advantages
/// `A(c) = r(c) − β log π(c | s) + J(c) − J(s)` with `s` the parent of `c`,
/// and the gradient `∂J/∂logit(c) = d(s) π(c | s) A(c)` with `d` the reach
/// probability.
fn soft_advantages(mdp: &ShapedMdp, lp: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let tree = &mdp.tree;
    let n = tree.len();
    let mut j = vec![0.0; n];
    for id in (0..n).rev() {
        j[id] = tree
            .node(id)
            .children
            .iter()
            .map(|&c| {
                let p = lp[c].exp();
                if p > 0.0 {
                    p * (mdp.reward[c] - mdp.beta * lp[c] + j[c])
                } else {
                    0.0
                }
            })
            .sum();
    }
    let mut reach = vec![0.0; n];
    reach[0] = 1.0;
    let mut adv = vec![0.0; n];
    let mut grad = vec![0.0; n];
    for id in 1..n {
        let parent = tree.node(id).parent.unwrap();
        let p = lp[id].exp();
        reach[id] = reach[parent] * p;
        adv[id] = mdp.reward[id] - mdp.beta * lp[id] + j[id] - j[parent];
        grad[id] = reach[parent] * p * adv[id];
    }
    (j[0], adv, grad)
}

const MAX_LOGIT_STEP: f64 = 1.0;

fn sample_path(mdp: &ShapedMdp, lp: &[f64], rng: &mut Stream) -> Vec<usize> {
    let mut path = Vec::with_capacity(mdp.horizon);
    let mut node = 0;
    loop {
        let n = mdp.tree.node(node);
        if n.children.is_empty() {
            return path;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = *n.children.last().unwrap();
        for &c in &n.children {
            acc += lp[c].exp();
            if u < acc {
                pick = c;
                break;
            }
        }
        path.push(pick);
        node = pick;
    }
}

/// Train a fresh tree policy, warm-started at the reference model, on the
/// entropy-regularized shaped return. Exact mode (`batch_size == 0`) takes
/// full-gradient steps with backtracking, so the objective never decreases.
pub fn estep_policy_gradient(
    model: &LogitModel,
    x: usize,
    event: &EventSpec,
    cfg: &PolicyGradConfig,
    rng: &mut Stream,
) -> Result<EStepResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mdp = planner::shape_rewards(model, x, event)?.with_beta(cfg.beta)?;
    let view = model.conditional_tables(x);
    let mut policy = TreePolicy {
        logits: (0..mdp.tree.len()).map(|c| if c == 0 { 0.0 } else { view.log_cond(c) }).collect(),
    };
    let mut lp = policy.log_policy(&mdp);
    let mut objective = planner::regularized_return(&mdp, &lp);
    let mut samples = 0usize;
    if cfg.batch_size == 0 {
        // Ascend along the clipped soft advantage. That is the per-state
        // natural-gradient direction; its inner product with the gradient is
        // Σ d π A clip(A) ≥ 0, and backtracking keeps every step an ascent.
        let mut step = cfg.step_size;
        for _ in 0..cfg.iterations {
            let (_, adv, grad) = soft_advantages(&mdp, &lp);
            if math::max_abs(&grad) == 0.0 {
                break;
            }
            let dir: Vec<f64> = adv.iter().map(|a| a.clamp(-MAX_LOGIT_STEP, MAX_LOGIT_STEP)).collect();
            let mut accepted = false;
            for _ in 0..60 {
                let cand = TreePolicy {
                    logits: policy.logits.iter().zip(&dir).map(|(l, d)| l + step * d).collect(),
                };
                let clp = cand.log_policy(&mdp);
                let cj = planner::regularized_return(&mdp, &clp);
                if cj >= objective {
                    policy = cand;
                    lp = clp;
                    objective = cj;
                    step *= 1.2;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
    } else {
        let b = cfg.batch_size;
        let mut decreases = 0usize;
        let mut paths = Vec::with_capacity(b);
        let mut returns = Vec::with_capacity(b);
        for _ in 0..cfg.iterations {
            paths.clear();
            returns.clear();
            for _ in 0..b {
                let path = sample_path(&mdp, &lp, rng);
                let g: f64 = path.iter().map(|&c| mdp.reward[c] - cfg.beta * lp[c]).sum();
                paths.push(path);
                returns.push(g);
            }
            samples += b;
            let total: f64 = returns.iter().sum();
            let mut adv: Vec<f64> = returns
                .iter()
                .map(|&g| match cfg.baseline {
                    Baseline::None => g,
                    Baseline::MeanReturn if b > 1 => g - (total - g) / (b - 1) as f64,
                    Baseline::MeanReturn => g,
                })
                .collect();
            if cfg.normalize_advantage && b > 1 {
                let mean = returns.iter().sum::<f64>() / b as f64;
                let var = returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / b as f64;
                let sd = var.sqrt();
                if sd > 0.0 {
                    adv.iter_mut().for_each(|a| *a /= sd);
                } else {
                    adv.iter_mut().for_each(|a| *a = 0.0);
                }
            }
            let mut grad = vec![0.0; mdp.tree.len()];
            for (path, &a) in paths.iter().zip(&adv) {
                if a == 0.0 {
                    continue;
                }
                let mut state = 0;
                for &c in path {
                    for &k in &mdp.tree.node(state).children {
                        grad[k] -= a * lp[k].exp();
                    }
                    grad[c] += a;
                    state = c;
                }
            }
            let scale = cfg.step_size / b as f64;
            policy.logits.iter_mut().zip(&grad).for_each(|(l, g)| *l += scale * g);
            lp = policy.log_policy(&mdp);
            let j = planner::regularized_return(&mdp, &lp);
            if j < objective {
                decreases += 1;
                if decreases >= 50 {
                    return Err(Error::Divergence { count: decreases });
                }
            } else {
                decreases = 0;
            }
            objective = j;
        }
    }
    let dist = planner::leaf_distribution(&planner::SoftPlan {
        tree: mdp.tree.clone(),
        beta: cfg.beta,
        q: Vec::new(),
        v: Vec::new(),
        log_policy: lp,
    });
    let mut r = finish(model, x, event, "policy_gradient", Some(dist), start);
    r.samples_used = samples;
    r.objective = Some(objective);
    Ok(r)
}

/// Sample `budget` pairs from the model. Hard evaluators keep accepted draws;
/// other evaluators keep every event draw weighted by `P(o ∈ Ô | x, z, y)`.
pub fn estep_rejection(
    model: &LogitModel,
    x: usize,
    event: &EventSpec,
    budget: usize,
    rng: &mut Stream,
) -> Result<EStepResult> {
    let start = Instant::now();
    let task = model.task();
    let mask = task.event_mask(x, event)?;
    let view = model.conditional_tables(x);
    let hard = task.is_hard();
    let mut weights = vec![0.0; task.num_pairs()];
    let mut accepted = 0usize;
    let mut weight_sum = 0.0;
    for _ in 0..budget {
        let p = view.sample(rng);
        let (z, y) = task.split_pair(p);
        if !mask.contains_pair(z, y) {
            continue;
        }
        let lw = task.log_obs_mass(x, z, y, &mask.obs);
        if lw <= LOG_ZERO {
            continue;
        }
        let w = lw.exp();
        if hard {
            if w >= 0.5 {
                weights[p] += 1.0;
                accepted += 1;
                weight_sum += 1.0;
            }
        } else {
            weights[p] += w;
            weight_sum += w;
            accepted += 1;
        }
    }
    let posterior = (weight_sum > 0.0).then(|| weights.iter().map(|w| w / weight_sum).collect());
    let mut r = finish(model, x, event, "rejection", posterior, start);
    r.samples_used = budget;
    r.acceptance_rate = Some(if budget == 0 {
        0.0
    } else if hard {
        accepted as f64 / budget as f64
    } else {
        weight_sum / budget as f64
    });
    Ok(r)
}

/// Run `backend` for one prompt with its own stream.
pub fn run_estep(
    model: &LogitModel,
    x: usize,
    event: &EventSpec,
    backend: &EStepBackend,
    seed: u64,
    iteration: u64,
) -> Result<EStepResult> {
    let mut stream = rng::stream(seed, backend.name(), &[x as u64, iteration]);
    match backend {
        EStepBackend::Exact => estep_exact(model, x, event),
        EStepBackend::Planning { beta } => estep_planning(model, x, event, *beta),
        EStepBackend::PolicyGradient(cfg) => estep_policy_gradient(model, x, event, cfg, &mut stream),
        EStepBackend::Rejection { budget } => estep_rejection(model, x, event, *budget, &mut stream),
    }
}

/// All prompts in parallel, results in prompt order. Prompts whose event has
/// no mass under an exact or planning backend come back without a posterior.
pub fn run_estep_all(
    model: &LogitModel,
    event: &EventSpec,
    backend: &EStepBackend,
    seed: u64,
    iteration: u64,
) -> Result<Vec<EStepResult>> {
    (0..model.task().num_prompts())
        .into_par_iter()
        .map(|x| match run_estep(model, x, event, backend, seed, iteration) {
            Err(Error::ZeroMassEvent { .. }) | Err(Error::UnreachableEvent { .. }) => Ok(EStepResult {
                prompt: x,
                backend: backend.name(),
                posterior: None,
                tv_error: 1.0,
                samples_used: 0,
                acceptance_rate: Some(0.0),
                objective: None,
                wall_time: Duration::ZERO,
            }),
            other => other,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FeatureKind;
    use crate::task::{random_task, EvaluatorSpec, GenerativeTask, Subset, TaskKind, TaskSpec, VerifierScope};
    use rand::Rng;
    use std::sync::Arc;

    fn carry(d: usize, b: usize) -> Arc<GenerativeTask> {
        Arc::new(
            TaskSpec::new(TaskKind::CarryAddition { digits: d, base: b }, 0, EvaluatorSpec::default())
                .build()
                .unwrap(),
        )
    }

    fn twenty(seed: u64) -> Arc<GenerativeTask> {
        Arc::new(random_task(1, 5, 4, seed, EvaluatorSpec::RandomHard { accept_prob: 0.5 }).unwrap())
    }

    #[test]
    fn exact_has_zero_error_and_matches_oracle() {
        let t = carry(1, 3);
        let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 1.0, 2).unwrap();
        let r = estep_exact(&m, 3, &EventSpec::accepted()).unwrap();
        assert_eq!(r.tv_error, 0.0);
        let q = JointModel::new(&m).exact_posterior(3, &EventSpec::accepted()).unwrap().pair_marginal(&t);
        assert_eq!(r.posterior.as_ref().unwrap(), &q);
        assert_eq!(r.posterior.unwrap()[t.gold_pair(3)], 1.0);
    }

    #[test]
    fn planning_agrees_with_exact() {
        let t = carry(1, 4);
        let m = LogitModel::zeros(t.clone(), FeatureKind::Tabular).unwrap();
        for x in 0..t.num_prompts() {
            let r = estep_planning(&m, x, &EventSpec::accepted(), 1.0).unwrap();
            assert!(r.tv_error <= 1e-8);
        }
    }

    #[test]
    fn planning_on_full_event_recovers_model() {
        let t = carry(1, 3);
        let m = LogitModel::random(t.clone(), FeatureKind::Bigram { per_prompt: true }, 1.0, 4).unwrap();
        let r = estep_planning(&m, 1, &EventSpec::full(), 1.0).unwrap();
        assert!(math::total_variation(r.posterior.as_ref().unwrap(), &m.probs(1)) <= 1e-12);
    }

    #[test]
    fn planning_with_other_beta_departs_from_posterior() {
        let t = twenty(3);
        let m = LogitModel::random(t, FeatureKind::Tabular, 2.0, 1).unwrap();
        let r = estep_planning(&m, 0, &EventSpec::accepted(), 2.0).unwrap();
        assert!(r.tv_error > 1e-6);
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let t = twenty(5);
        let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 1.0, 5).unwrap();
        let cfg = PolicyGradConfig { iterations: 0, ..Default::default() };
        let r = estep_policy_gradient(&m, 0, &EventSpec::accepted(), &cfg, &mut rng::stream(0, "t", &[])).unwrap();
        let q = JointModel::new(&m).exact_posterior(0, &EventSpec::accepted()).unwrap().pair_marginal(&t);
        assert!((r.tv_error - math::total_variation(&m.probs(0), &q)).abs() < 1e-12);
    }

    #[test]
    fn exact_gradient_policy_is_monotone_and_bounded() {
        let t = twenty(7);
        let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 1.0, 7).unwrap();
        let ev = EventSpec::accepted();
        let mdp = planner::shape_rewards(&m, 0, &ev).unwrap();
        let vstar = planner::soft_value_iteration(&mdp).unwrap().root_value();
        let mut last = f64::NEG_INFINITY;
        for iters in [0, 1, 5, 20, 100, 400] {
            let cfg = PolicyGradConfig { iterations: iters, batch_size: 0, ..Default::default() };
            let r = estep_policy_gradient(&m, 0, &ev, &cfg, &mut rng::stream(0, "t", &[])).unwrap();
            let j = r.objective.unwrap();
            assert!(j >= last);
            assert!(j <= vstar + 1e-6);
            last = j;
        }
    }

    #[test]
    fn sampled_policy_gradient_reaches_posterior_on_twenty_outcomes() {
        let t = twenty(0);
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 0).unwrap();
        let cfg = PolicyGradConfig { step_size: 0.1, iterations: 5000, ..Default::default() };
        let r = estep_policy_gradient(&m, 0, &EventSpec::accepted(), &cfg, &mut rng::stream(0, "pg", &[])).unwrap();
        assert!(r.tv_error <= 0.05, "tv {}", r.tv_error);
        assert_eq!(r.samples_used, 5000 * 16);
    }

    #[test]
    fn exact_mode_fixed_point_is_the_posterior() {
        for seed in 0..5 {
            let t = twenty(seed);
            let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, seed).unwrap();
            let cfg = PolicyGradConfig { batch_size: 0, iterations: 2000, ..Default::default() };
            let r = estep_policy_gradient(&m, 0, &EventSpec::accepted(), &cfg, &mut rng::stream(0, "pg", &[])).unwrap();
            assert!(r.tv_error <= 1e-6, "tv {}", r.tv_error);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn policy_gradient_matches_finite_differences() {
        let t = twenty(2);
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 2).unwrap();
        let mdp = planner::shape_rewards(&m, 0, &EventSpec::full()).unwrap();
        let mut r = rng::stream(9, "fd", &[]);
        let policy = TreePolicy { logits: (0..mdp.tree.len()).map(|_| r.gen_range(-1.0..1.0)).collect() };
        let (_, _, g) = soft_advantages(&mdp, &policy.log_policy(&mdp));
        let h = 1e-5;
        for c in 1..mdp.tree.len() {
            let mut up = policy.clone();
            up.logits[c] += h;
            let mut dn = policy.clone();
            dn.logits[c] -= h;
            let fd = (planner::regularized_return(&mdp, &up.log_policy(&mdp))
                - planner::regularized_return(&mdp, &dn.log_policy(&mdp)))
                / (2.0 * h);
            assert!((fd - g[c]).abs() <= 1e-6 * (1.0 + g[c].abs()), "node {c}: {fd} vs {}", g[c]);
        }
    }

    #[test]
    fn rejection_acceptance_matches_event_mass() {
        let t = carry(1, 2);
        let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 1.0, 3).unwrap();
        let ev = EventSpec { latent: Subset::All, response: Subset::Gold, obs: Subset::All };
        let p = JointModel::new(&m).event_logprob(2, &ev).unwrap().exp();
        let n = 20_000;
        let r = estep_rejection(&m, 2, &ev, n, &mut rng::stream(1, "t", &[])).unwrap();
        let rate = r.acceptance_rate.unwrap();
        assert!((rate - p).abs() <= 4.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    #[test]
    fn rejection_converges_on_six_outcomes() {
        let t = Arc::new(random_task(1, 3, 2, 1, EvaluatorSpec::RandomHard { accept_prob: 0.6 }).unwrap());
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 2).unwrap();
        let r = estep_rejection(&m, 0, &EventSpec::accepted(), 100_000, &mut rng::stream(2, "t", &[])).unwrap();
        assert!(r.tv_error <= 0.02);
    }

    #[test]
    fn soft_evaluator_uses_importance_weights() {
        let t = Arc::new(random_task(1, 3, 2, 4, EvaluatorSpec::RandomSoft { beta: 1.0, scale: 2.0 }).unwrap());
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 2).unwrap();
        let r = estep_rejection(&m, 0, &EventSpec::accepted(), 100_000, &mut rng::stream(3, "t", &[])).unwrap();
        assert!(r.tv_error <= 0.02);
    }

    #[test]
    fn zero_mass_rejection_is_flagged() {
        let t = Arc::new(random_task(1, 2, 2, 0, EvaluatorSpec::Verifier { scope: VerifierScope::AnswerAndTrace }).unwrap());
        let m = LogitModel::zeros(t, FeatureKind::Tabular).unwrap();
        let ev = EventSpec { latent: Subset::NotGold, response: Subset::All, obs: Subset::Gold };
        let r = estep_rejection(&m, 0, &ev, 500, &mut rng::stream(0, "t", &[])).unwrap();
        assert!(r.zero_acceptance());
        assert_eq!(r.tv_error, 1.0);
        assert_eq!(r.acceptance_rate, Some(0.0));
    }

    #[test]
    fn backend_streams_are_reproducible() {
        let t = carry(1, 3);
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 8).unwrap();
        let b = EStepBackend::Rejection { budget: 300 };
        let a = run_estep_all(&m, &EventSpec::gold_answer(), &b, 42, 3).unwrap();
        let c = run_estep_all(&m, &EventSpec::gold_answer(), &b, 42, 3).unwrap();
        for (u, v) in a.iter().zip(&c) {
            assert_eq!(u.posterior, v.posterior);
        }
    }
}
