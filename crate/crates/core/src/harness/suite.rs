//! Property checks shared by the `verify` command and the acceptance tests.
//! Each check measures a worst case over its instances and compares it to a
//! fixed threshold.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::estep::{estep_planning_with, estep_policy_gradient, EStepBackend, PolicyGradConfig};
use crate::graph::{event_mass, JointModel};
use crate::math;
use crate::model::{FeatureKind, LogitModel};
use crate::oracle;
use crate::planner::{self, ShapedMdp, ShapingFault};
use crate::rng;
use crate::task::{
    EvaluatorSpec, EventSpec, GenerativeTask, Subset, TaskKind, TaskSpec, VerifierScope,
};
use crate::train::baselines::{filter_sft_update, restem_task_update, Sampling};
use crate::train::dpo::{iterative_pref_loop, latent_dpo_loss_and_grad, CandidateSource, PrefLoopConfig, PreferencePair};
use crate::train::{
    brite_iterate, reference_gap, reference_optimum, run_brite, run_brite_with, BriteConfig, MStepSpec,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub measured: f64,
    pub threshold: f64,
    pub instances: usize,
    pub detail: String,
}

impl Check {
    fn at_most(measured: f64, threshold: f64, instances: usize, detail: impl Into<String>) -> Check {
        Check { passed: measured <= threshold, measured, threshold, instances, detail: detail.into() }
    }

    fn error(e: Error) -> Check {
        Check { passed: false, measured: f64::NAN, threshold: f64::NAN, instances: 0, detail: format!("error: {e}") }
    }
}

fn guard(f: impl FnOnce() -> Result<Check>) -> Check {
    f().unwrap_or_else(Check::error)
}

/// A task, event and feature map used across checks.
#[derive(Clone, Debug)]
pub struct Instance {
    pub label: String,
    pub spec: TaskSpec,
    pub event: EventSpec,
    pub features: FeatureKind,
}

fn inst(label: &str, generator: TaskKind, evaluator: EvaluatorSpec, event: EventSpec, features: FeatureKind) -> Instance {
    Instance { label: label.into(), spec: TaskSpec::new(generator, 0, evaluator), event, features }
}

fn carry(digits: usize, base: usize) -> TaskKind {
    TaskKind::CarryAddition { digits, base }
}

fn automaton(num_states: usize, input_len: usize) -> TaskKind {
    TaskKind::AutomatonTrace { num_states, input_len }
}

fn random_kind(prompts: usize, latents: usize, responses: usize, alphabet: usize, max_len: usize) -> TaskKind {
    TaskKind::Random { prompts, latents, responses, alphabet, max_len }
}

/// The built-in task suite: every generator, evaluator and feature family,
/// each with at most 10^4 pairs.
pub fn builtin_suite() -> Vec<Instance> {
    use EvaluatorSpec as E;
    use FeatureKind as F;
    let trace = E::Verifier { scope: VerifierScope::AnswerAndTrace };
    let answer = E::Verifier { scope: VerifierScope::Answer };
    let acc = EventSpec::accepted;
    vec![
        inst("carry-1x2 trace", carry(1, 2), trace.clone(), acc(), F::Tabular),
        inst("carry-1x3 answer", carry(1, 3), answer.clone(), acc(), F::Factored),
        inst("carry-1x4 soft-mismatch", carry(1, 4), E::SoftMismatch { beta: 1.0, penalty: 1.0 }, acc(), F::Bigram { per_prompt: false }),
        inst(
            "carry-1x5 soft-verified",
            carry(1, 5),
            E::SoftVerified { beta: 0.5, scope: VerifierScope::Answer, penalty: 2.0 },
            acc(),
            F::Tabular,
        ),
        inst("carry-1x6 full event", carry(1, 6), E::SoftMismatch { beta: 2.0, penalty: 1.0 }, EventSpec::full(), F::Tabular),
        inst("carry-1x10 trace", carry(1, 10), trace.clone(), acc(), F::Factored),
        inst("carry-2x2 gold answer", carry(2, 2), answer.clone(), EventSpec::gold_answer(), F::Bigram { per_prompt: true }),
        inst("carry-2x3 soft-mismatch", carry(2, 3), E::SoftMismatch { beta: 1.0, penalty: 0.5 }, acc(), F::Random { dim: 8, seed: 1 }),
        inst("carry-2x4 trace", carry(2, 4), trace.clone(), acc(), F::Factored),
        inst("carry-3x2 answer", carry(3, 2), answer.clone(), acc(), F::Tabular),
        inst("automaton-2x2 trace", automaton(2, 2), trace.clone(), acc(), F::Tabular),
        inst("automaton-3x3 answer", automaton(3, 3), answer.clone(), acc(), F::Bigram { per_prompt: false }),
        inst("automaton-3x4 soft-mismatch", automaton(3, 4), E::SoftMismatch { beta: 1.0, penalty: 1.0 }, acc(), F::Factored),
        inst("automaton-4x4 gold answer", automaton(4, 4), trace.clone(), EventSpec::gold_answer(), F::Random { dim: 6, seed: 2 }),
        inst(
            "automaton-2x6 soft-verified",
            automaton(2, 6),
            E::SoftVerified { beta: 1.0, scope: VerifierScope::AnswerAndTrace, penalty: 3.0 },
            acc(),
            F::Tabular,
        ),
        inst("random hard", random_kind(4, 6, 5, 3, 3), E::RandomHard { accept_prob: 0.3 }, acc(), F::Tabular),
        inst("random soft", random_kind(4, 6, 5, 3, 3), E::RandomSoft { beta: 0.7, scale: 4.0 }, acc(), F::Bigram { per_prompt: false }),
        inst(
            "random table obs subset",
            random_kind(3, 5, 4, 3, 3),
            E::RandomTable { obs_size: 3 },
            EventSpec { latent: Subset::All, response: Subset::All, obs: Subset::Indices(vec![1, 2]) },
            F::Factored,
        ),
        inst(
            "random table restricted",
            random_kind(3, 6, 4, 3, 3),
            E::RandomTable { obs_size: 4 },
            EventSpec { latent: Subset::Indices(vec![0, 1, 2]), response: Subset::NotGold, obs: Subset::Gold },
            F::Tabular,
        ),
        inst("random wide", random_kind(6, 20, 30, 4, 4), E::RandomSoft { beta: 1.0, scale: 3.0 }, acc(), F::Random { dim: 5, seed: 3 }),
        inst(
            "tagged carry-1x3",
            TaskKind::Tagged { inner: Box::new(carry(1, 3)), num_tags: 3 },
            trace.clone(),
            acc(),
            F::Tabular,
        ),
        inst(
            "tagged automaton-2x3",
            TaskKind::Tagged { inner: Box::new(automaton(2, 3)), num_tags: 2 },
            answer,
            acc(),
            F::Factored,
        ),
    ]
}

impl Instance {
    pub fn task(&self) -> Result<Arc<GenerativeTask>> {
        Ok(Arc::new(self.spec.build()?))
    }

    pub fn model(&self, scale: f64, seed: u64) -> Result<LogitModel> {
        LogitModel::random(self.task()?, self.features.clone(), scale, seed)
    }
}

/// Small random instances for checks that need many repetitions.
fn small_instance(k: u64) -> Result<(LogitModel, EventSpec)> {
    let evaluator = match k % 4 {
        0 => EvaluatorSpec::RandomHard { accept_prob: 0.4 },
        1 => EvaluatorSpec::RandomSoft { beta: 0.8, scale: 3.0 },
        2 => EvaluatorSpec::RandomTable { obs_size: 3 },
        _ => EvaluatorSpec::RandomSoft { beta: 2.0, scale: 1.0 },
    };
    let features = match (k / 4) % 4 {
        0 => FeatureKind::Tabular,
        1 => FeatureKind::Factored,
        2 => FeatureKind::Bigram { per_prompt: k.is_multiple_of(2) },
        _ => FeatureKind::Random { dim: 4, seed: k },
    };
    let event = match (k / 16) % 3 {
        0 => EventSpec::accepted(),
        1 => EventSpec::gold_answer(),
        _ => EventSpec { latent: Subset::NotGold, response: Subset::All, obs: Subset::Gold },
    };
    let task = Arc::new(TaskSpec::new(random_kind(3, 4, 3, 3, 3), k, evaluator).build()?);
    Ok((LogitModel::random(task, features, 1.5, k)?, event))
}

/// Soft planning on random tree MDPs reproduces the softmax of path returns.
pub fn softmax_plan_equivalence(count: usize) -> Check {
    guard(|| {
        let mut worst: f64 = 0.0;
        for k in 0..count as u64 {
            let mut r = rng::stream(k, "suite-mdp", &[]);
            let h = r.gen_range(1..=5);
            let a = r.gen_range(1..=6);
            let beta = [0.3, 1.0, 3.0][(k % 3) as usize];
            let mdp = ShapedMdp::random(h, a, beta, &mut r)?;
            let plan = planner::soft_value_iteration(&mdp)?;
            let tv = math::total_variation(&planner::leaf_distribution(&plan), &oracle::trajectory_softmax(&mdp));
            worst = worst.max(tv);
        }
        Ok(Check::at_most(worst, 1e-9, count, format!("max TV over {count} MDPs")))
    })
}

/// Planning on shaped rewards reproduces the exact posterior on every
/// built-in instance; `fault` corrupts the shaping.
pub fn shaping_posterior(fault: ShapingFault) -> Check {
    guard(|| {
        let suite = builtin_suite();
        let mut worst: f64 = 0.0;
        let mut worst_label = String::new();
        for (k, instance) in suite.iter().enumerate() {
            let m = instance.model(1.0, k as u64)?;
            let j = JointModel::new(&m);
            for x in 0..m.task().num_prompts() {
                let exact = j.exact_posterior(x, &instance.event)?.pair_marginal(m.task());
                let plan = match estep_planning_with(&m, x, &instance.event, 1.0, fault) {
                    Ok(r) => r.posterior.expect("planning returns a posterior"),
                    Err(e) => return Ok(Check { detail: format!("{}: {e}", instance.label), ..Check::error(e) }),
                };
                let tv = math::total_variation(&plan, &exact);
                if tv > worst {
                    worst = tv;
                    worst_label = instance.label.clone();
                }
            }
        }
        Ok(Check::at_most(worst, 1e-8, suite.len(), format!("max TV over {} instances (worst: {worst_label})", suite.len())))
    })
}

/// Exact-mode policy gradient reaches the posterior on small instances.
pub fn policy_gradient_posterior() -> Check {
    guard(|| {
        let mut worst: f64 = 0.0;
        let n = 5;
        for seed in 0..n {
            let task = Arc::new(TaskSpec::new(random_kind(1, 5, 4, 3, 3), seed, EvaluatorSpec::RandomHard { accept_prob: 0.5 }).build()?);
            let m = LogitModel::random(task, FeatureKind::Tabular, 1.0, seed)?;
            let cfg = PolicyGradConfig { step_size: 0.1, batch_size: 0, iterations: 2000, ..Default::default() };
            let r = estep_policy_gradient(&m, 0, &EventSpec::accepted(), &cfg, &mut rng::stream(seed, "suite-pg", &[]))?;
            worst = worst.max(r.tv_error);
        }
        Ok(Check::at_most(worst, 1e-6, n as usize, "max TV of exact-mode policy gradient"))
    })
}

fn random_variational(len: usize, r: &mut impl Rng) -> Vec<f64> {
    let mut q: Vec<f64> = (0..len)
        .map(|_| if r.gen_bool(0.2) { 0.0 } else { -r.gen::<f64>().max(1e-300).ln() })
        .collect();
    if q.iter().all(|&v| v == 0.0) {
        q[r.gen_range(0..len)] = 1.0;
    }
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= s);
    q
}

/// The lower bound never exceeds the objective and is tight at the posterior.
pub fn elbo_bound(instances: usize, draws: usize) -> Check {
    guard(|| {
        let mut excess = f64::NEG_INFINITY;
        let mut tight: f64 = 0.0;
        for k in 0..instances as u64 {
            let (m, ev) = small_instance(k)?;
            let j = JointModel::new(&m);
            let mut r = rng::stream(k, "suite-elbo", &[]);
            for d in 0..draws {
                let x = d % m.task().num_prompts();
                let post = match j.exact_posterior(x, &ev) {
                    Ok(p) => p,
                    Err(Error::ZeroMassEvent { .. }) => continue,
                    Err(e) => return Err(e),
                };
                let q = random_variational(post.support.len(), &mut r);
                let rep = j.elbo(x, &ev, &q)?;
                excess = excess.max(rep.elbo - rep.objective);
                if d < m.task().num_prompts() {
                    tight = tight.max(j.elbo(x, &ev, &post.probs)?.gap.abs());
                }
            }
        }
        let measured = excess.max(tight);
        Ok(Check::at_most(
            measured,
            1e-10,
            instances,
            format!("max elbo - objective {excess:e}, max gap at posterior {tight:e}, {draws} draws per instance"),
        ))
    })
}

/// Log-partition form of the KL against direct summation.
pub fn kl_identity(draws: usize) -> Check {
    guard(|| {
        let mut worst: f64 = 0.0;
        for k in 0..draws as u64 {
            let (a, _) = small_instance(k)?;
            let b = LogitModel::random(a.task().clone(), a.features().kind().clone(), 1.5, k ^ 0x5a5a)?;
            let b = LogitModel::from_parts(a.features().clone(), b.weights().to_vec())?;
            for x in 0..a.task().num_prompts() {
                let direct = oracle::kl(&oracle::joint(&a, x), &oracle::joint(&b, x));
                worst = worst.max((LogitModel::kl_identity_form(&a, &b, x)? - direct).abs());
            }
        }
        Ok(Check::at_most(worst, 1e-9, draws, "max |identity - direct|"))
    })
}

/// Analytic objective gradient against central differences of the
/// brute-force objective.
pub fn gradient_identity(draws: usize) -> Check {
    guard(|| {
        let mut worst: f64 = 0.0;
        for k in 0..draws as u64 {
            let (m, ev) = small_instance(k)?;
            let g = JointModel::new(&m).objective_gradient(&ev)?;
            let fd = oracle::finite_difference(m.weights(), 1e-5, |w| oracle::objective(&m.with_weights(w.to_vec()), &ev))?;
            worst = worst.max(oracle::relative_error(&g, &fd));
        }
        Ok(Check::at_most(worst, 1e-6, draws, "max relative error, |a - b| / max(1, |b|)"))
    })
}

struct EmRun {
    model: LogitModel,
    event: EventSpec,
    mstep: MStepSpec,
}

fn em_runs(count: usize) -> Result<Vec<EmRun>> {
    let mut runs = Vec::new();
    for k in 0..count as u64 {
        let (m, ev) = small_instance(k)?;
        let tabular = m.features().is_tabular();
        let mstep = if tabular { MStepSpec::ClosedForm } else { MStepSpec::GradientAscent { steps: 10, rate: 1.0 } };
        runs.push(EmRun { model: m, event: ev, mstep });
    }
    for (k, inst) in builtin_suite().into_iter().take(4).enumerate() {
        let m = inst.model(0.5, k as u64)?;
        let mstep = if m.features().is_tabular() {
            MStepSpec::ClosedForm
        } else {
            MStepSpec::GradientAscent { steps: 5, rate: 1.0 }
        };
        runs.push(EmRun { model: m, event: inst.event, mstep });
    }
    Ok(runs)
}

/// Exact-E runs never decrease the objective; measured is the largest drop.
pub fn em_monotone(count: usize, iterations: usize) -> Check {
    guard(|| {
        let runs = em_runs(count)?;
        let mut worst = f64::NEG_INFINITY;
        for r in &runs {
            let out = run_brite(&r.model, &r.event, &BriteConfig::exact(iterations, r.mstep.clone()), 0)?;
            for w in out.record.rows.windows(2) {
                worst = worst.max(w[0].objective - w[1].objective);
            }
        }
        Ok(Check::at_most(worst.max(0.0), 1e-12, runs.len(), format!("largest decrease over {iterations} iterations")))
    })
}

/// `min_t KL(P_t ‖ P_{t−1}) ≤ (ℒ_T − ℒ_0)/T + 1e-9` on every run; measured
/// is the largest `min_kl − bound`.
pub fn em_certificate(count: usize, iterations: usize) -> Check {
    guard(|| {
        let runs = em_runs(count)?;
        let mut worst = f64::NEG_INFINITY;
        let mut step_flags = 0;
        for r in &runs {
            let out = run_brite(&r.model, &r.event, &BriteConfig::exact(iterations, r.mstep.clone()), 0)?;
            let c = out.record.certificate().expect("at least one iteration");
            worst = worst.max(c.min_kl - c.bound);
            if r.mstep == MStepSpec::ClosedForm {
                step_flags += out.record.step_bound_violations().len();
            }
        }
        let mut check = Check::at_most(worst, 1e-9, runs.len(), "largest min_kl - bound");
        if step_flags > 0 {
            check.passed = false;
            check.detail = format!("{step_flags} per-iteration step bound violations under closed-form M-steps");
        }
        Ok(check)
    })
}

/// The restricted-feature pilot instance converges within 200 iterations.
pub fn em_convergence() -> Check {
    guard(|| {
        let task = Arc::new(
            TaskSpec::new(random_kind(8, 4, 3, 3, 3), 0, EvaluatorSpec::RandomHard { accept_prob: 0.3 }).build()?,
        );
        let m = LogitModel::random(task, FeatureKind::Random { dim: 3, seed: 0 }, 1.0, 0)?;
        let cfg = BriteConfig::exact(200, MStepSpec::GradientAscent { steps: 20, rate: 1.0 });
        let out = run_brite(&m, &EventSpec::accepted(), &cfg, 0)?;
        let o = out.record.objectives();
        let delta = (o[200] - o[199]).abs();
        let mut c = Check::at_most(delta, 1e-8, 1, format!("|L_200 - L_199|, L_200 = {}", o[200]));
        if !out.record.monotone_violations().is_empty() {
            c.passed = false;
            c.detail.push_str("; objective decreased");
        }
        Ok(c)
    })
}

/// Outcome of the reference-gap diagnostic on one run.
#[derive(Clone, Debug, PartialEq)]
pub struct GapRun {
    pub label: String,
    pub probe_passes: bool,
    pub bound_holds: bool,
    pub min_gap: f64,
    pub bound: f64,
}

pub fn reference_gap_runs(iterations: usize, ref_steps: usize) -> Result<Vec<GapRun>> {
    let mut out = Vec::new();
    let cases: Vec<(u64, FeatureKind, EvaluatorSpec, MStepSpec)> = vec![
        (0, FeatureKind::Tabular, EvaluatorSpec::RandomSoft { beta: 1.0, scale: 3.0 }, MStepSpec::ClosedForm),
        (1, FeatureKind::Tabular, EvaluatorSpec::RandomHard { accept_prob: 0.4 }, MStepSpec::ClosedForm),
        (2, FeatureKind::Random { dim: 3, seed: 2 }, EvaluatorSpec::RandomHard { accept_prob: 0.3 }, MStepSpec::GradientAscent { steps: 20, rate: 1.0 }),
        (3, FeatureKind::Factored, EvaluatorSpec::RandomSoft { beta: 1.0, scale: 2.0 }, MStepSpec::GradientAscent { steps: 20, rate: 1.0 }),
        (4, FeatureKind::Random { dim: 2, seed: 4 }, EvaluatorSpec::RandomTable { obs_size: 3 }, MStepSpec::GradientAscent { steps: 20, rate: 1.0 }),
    ];
    for (seed, features, evaluator, mstep) in cases {
        let task = Arc::new(TaskSpec::new(random_kind(4, 4, 3, 3, 3), seed, evaluator).build()?);
        let label = format!("{} / {}", task.name(), features.label());
        let m = LogitModel::random(task, features, 1.0, seed)?;
        let ev = EventSpec::accepted();
        let refm = reference_optimum(&m, &ev, ref_steps, 1.0)?;
        let run = run_brite_with(&m, &ev, &BriteConfig::exact(iterations, mstep), seed, Some(&refm), true, |_, _| Ok(()))?;
        let gap = reference_gap(&m, &run.record, &run.history, &refm, &ev)?;
        out.push(GapRun {
            label,
            probe_passes: gap.concavity_failures.is_empty(),
            bound_holds: gap.bound_holds,
            min_gap: gap.min_gap,
            bound: gap.bound,
        });
    }
    Ok(out)
}

/// Diagnostic: passes unless a run whose concavity probe passes violates
/// the bound.
pub fn reference_gap_diagnostic(iterations: usize, ref_steps: usize) -> Check {
    guard(|| {
        let runs = reference_gap_runs(iterations, ref_steps)?;
        let bad = runs.iter().filter(|r| r.probe_passes && !r.bound_holds).count();
        let detail = runs
            .iter()
            .map(|r| {
                let verdict = match (r.probe_passes, r.bound_holds) {
                    (true, true) => "holds",
                    (true, false) => "VIOLATED",
                    (false, _) => "informational",
                };
                format!("{}: probe {}, gap {:.3e} vs bound {:.3e} ({verdict})", r.label, if r.probe_passes { "passes" } else { "fails" }, r.min_gap, r.bound)
            })
            .collect::<Vec<_>>()
            .join("; ");
        Ok(Check { passed: bad == 0, measured: bad as f64, threshold: 0.0, instances: runs.len(), detail })
    })
}

fn max_weight_diff(a: &LogitModel, b: &LogitModel) -> f64 {
    a.weights().iter().zip(b.weights()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

/// Exact-weight keep-verified refits equal one exact EM iteration.
pub fn unify_filter_sft(count: usize) -> Check {
    guard(|| {
        let mut worst: f64 = 0.0;
        let scopes = [VerifierScope::Answer, VerifierScope::AnswerAndTrace];
        for k in 0..count as u64 {
            let evaluator = if k % 3 == 2 {
                EvaluatorSpec::RandomHard { accept_prob: 0.4 }
            } else {
                EvaluatorSpec::Verifier { scope: scopes[(k % 2) as usize] }
            };
            let generator = if k % 3 == 2 { random_kind(3, 5, 4, 3, 3) } else { carry(1, 2 + (k as usize % 3)) };
            let task = Arc::new(TaskSpec::new(generator, k, evaluator).build()?);
            let m = LogitModel::random(task, FeatureKind::Tabular, 1.0, k)?;
            let ev = if k % 2 == 0 { EventSpec::accepted() } else { EventSpec::gold_answer() };
            let f = filter_sft_update(&m, &ev, Sampling::ExactWeights, &MStepSpec::ClosedForm, k, 1)?;
            let (b, _) = brite_iterate(&m, &ev, &BriteConfig::exact(1, MStepSpec::ClosedForm), k, 1, None)?;
            worst = worst.max(max_weight_diff(&f.model, &b));
        }
        Ok(Check::at_most(worst, 1e-10, count, "max elementwise weight difference"))
    })
}

/// Exact-expectation reward-weighted refits equal one exact EM iteration
/// on the soft evaluator.
pub fn unify_restem(count: usize) -> Check {
    guard(|| {
        let mut worst: f64 = 0.0;
        for k in 0..count as u64 {
            let evaluator = match k % 3 {
                0 => EvaluatorSpec::SoftMismatch { beta: 0.5 + k as f64 * 0.1, penalty: 1.0 },
                1 => EvaluatorSpec::SoftVerified { beta: 1.0, scope: VerifierScope::Answer, penalty: 2.0 },
                _ => EvaluatorSpec::RandomSoft { beta: 0.7, scale: 3.0 },
            };
            let generator = if k % 3 == 2 { random_kind(3, 5, 4, 3, 3) } else { carry(1, 3) };
            let task = Arc::new(TaskSpec::new(generator, k, evaluator).build()?);
            let m = LogitModel::random(task, FeatureKind::Tabular, 1.0, k)?;
            let ev = EventSpec::accepted();
            let r = restem_task_update(&m, Sampling::ExactWeights, &MStepSpec::ClosedForm, k, 1)?;
            let (b, _) = brite_iterate(&m, &ev, &BriteConfig::exact(1, MStepSpec::ClosedForm), k, 1, None)?;
            worst = worst.max(max_weight_diff(&r.model, &b));
        }
        Ok(Check::at_most(worst, 1e-10, count, "max elementwise weight difference"))
    })
}

fn random_pairs(m: &LogitModel, k: u64, n: usize) -> Vec<PreferencePair> {
    let mut r = rng::stream(k, "suite-pairs", &[]);
    let t = m.task();
    (0..n)
        .map(|_| {
            let a = r.gen_range(0..t.num_pairs());
            let mut b = r.gen_range(0..t.num_pairs());
            if b == a {
                b = (a + 1) % t.num_pairs();
            }
            PreferencePair { prompt: r.gen_range(0..t.num_prompts()), preferred: a, dispreferred: b }
        })
        .collect()
}

/// Preference loss of a model against itself is log 2.
pub fn dpo_reference_loss(count: usize) -> Check {
    guard(|| {
        let mut worst: f64 = 0.0;
        for k in 0..count as u64 {
            let (m, _) = small_instance(k)?;
            let out = latent_dpo_loss_and_grad(&m, &m, &random_pairs(&m, k, 5), 0.3 + k as f64 * 0.1)?;
            worst = worst.max((out.loss - std::f64::consts::LN_2).abs());
        }
        Ok(Check::at_most(worst, 1e-12, count, "max |loss - log 2|"))
    })
}

pub fn dpo_gradient(count: usize) -> Check {
    guard(|| {
        let mut worst: f64 = 0.0;
        for k in 0..count as u64 {
            let (pol, _) = small_instance(k)?;
            let other = LogitModel::random(pol.task().clone(), pol.features().kind().clone(), 1.0, k + 101)?;
            let refm = LogitModel::from_parts(pol.features().clone(), other.weights().to_vec())?;
            let pairs = random_pairs(&pol, k, 4);
            let beta = 0.5 + (k % 4) as f64 * 0.5;
            let g = latent_dpo_loss_and_grad(&pol, &refm, &pairs, beta)?.grad;
            let fd = oracle::finite_difference(pol.weights(), 1e-5, |w| {
                Ok(latent_dpo_loss_and_grad(&pol.with_weights(w.to_vec()), &refm, &pairs, beta)?.loss)
            })?;
            worst = worst.max(oracle::relative_error(&g, &fd));
        }
        Ok(Check::at_most(worst, 1e-6, count, "max relative error, |a - b| / max(1, |b|)"))
    })
}

/// Adding a constant to one prompt's policy logits leaves the loss unchanged.
pub fn dpo_shift_invariance(count: usize) -> Check {
    guard(|| {
        let mut worst: f64 = 0.0;
        for k in 0..count as u64 {
            let task = Arc::new(TaskSpec::new(random_kind(3, 4, 3, 3, 3), k, EvaluatorSpec::RandomHard { accept_prob: 0.4 }).build()?);
            let pol = LogitModel::random(task.clone(), FeatureKind::Tabular, 1.0, k)?;
            let refm = LogitModel::random(task.clone(), FeatureKind::Tabular, 1.0, k + 7)?;
            let pairs = random_pairs(&pol, k, 6);
            let base = latent_dpo_loss_and_grad(&pol, &refm, &pairs, 1.0)?.loss;
            let n = task.num_pairs();
            for x in 0..task.num_prompts() {
                let c = 3.7 * (x as f64 + 1.0);
                let mut w = pol.weights().to_vec();
                w[x * n..(x + 1) * n].iter_mut().for_each(|v| *v += c);
                let shifted = latent_dpo_loss_and_grad(&pol.with_weights(w), &refm, &pairs, 1.0)?.loss;
                worst = worst.max((shifted - base).abs());
            }
        }
        Ok(Check::at_most(worst, 1e-10, count, "max |loss change| under per-prompt logit shifts"))
    })
}

/// The low-acceptance pilot task used by the trend checks.
pub fn pilot_task() -> Result<Arc<GenerativeTask>> {
    Ok(Arc::new(TaskSpec::new(carry(1, 10), 0, EvaluatorSpec::default()).build()?))
}

pub fn pilot_model(task: &Arc<GenerativeTask>, seed: u64) -> Result<LogitModel> {
    LogitModel::random(task.clone(), FeatureKind::Factored, 0.1, seed)
}

/// Per-seed outcome of the sampling-efficiency comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendSeed {
    pub seed: u64,
    pub event_mass: f64,
    pub tv: (f64, f64),
    pub accuracy: (f64, f64),
    pub samples: (usize, usize),
}

pub const TREND_BUDGET: usize = 16;
pub const TREND_ITERATIONS: usize = 5;

/// Planning posterior plus `N` posterior draws against `N` rejection draws,
/// both refit with the same weighted-MLE M-step.
pub fn trend_rejection_seed(seed: u64) -> Result<TrendSeed> {
    let task = pilot_task()?;
    let m = pilot_model(&task, seed)?;
    let ev = EventSpec::accepted();
    let event_mass = (0..task.num_prompts()).map(|x| event_mass(&m, x, &ev)).sum::<Result<f64>>()? / task.num_prompts() as f64;
    let mstep = MStepSpec::WeightedMle { steps: 10, rate: 1.0 };
    let brite = BriteConfig {
        iterations: TREND_ITERATIONS,
        estep: EStepBackend::Planning { beta: 1.0 },
        mstep: mstep.clone(),
        posterior_samples: Some(TREND_BUDGET),
        timing: false,
    };
    let rejection = BriteConfig {
        iterations: TREND_ITERATIONS,
        estep: EStepBackend::Rejection { budget: TREND_BUDGET },
        mstep,
        posterior_samples: None,
        timing: false,
    };
    let a = run_brite(&m, &ev, &brite, seed)?.record;
    let b = run_brite(&m, &ev, &rejection, seed)?.record;
    let mean_tv = |r: &crate::train::RunRecord| r.rows[1..].iter().map(|r| r.tv_estep).sum::<f64>() / TREND_ITERATIONS as f64;
    let samples = |r: &crate::train::RunRecord| r.rows.iter().map(|r| r.samples).sum::<usize>();
    Ok(TrendSeed {
        seed,
        event_mass,
        tv: (mean_tv(&a), mean_tv(&b)),
        accuracy: (a.last().acc_greedy, b.last().acc_greedy),
        samples: (samples(&a), samples(&b)),
    })
}

/// Preference rounds with posterior candidates against model candidates.
pub fn trend_preference_seed(seed: u64) -> Result<(f64, f64)> {
    let task = pilot_task()?;
    let m = pilot_model(&task, seed)?;
    let ev = EventSpec::accepted();
    let cfg = |source| PrefLoopConfig { iterations: TREND_ITERATIONS, candidates: TREND_BUDGET, source, beta: 1.0, steps: 20, rate: 2.0 };
    let a = iterative_pref_loop(&m, &ev, &cfg(CandidateSource::PosteriorSample { penalty: 8.0 }), seed)?;
    let b = iterative_pref_loop(&m, &ev, &cfg(CandidateSource::ModelSample), seed)?;
    Ok((a.rows.last().unwrap().acc_greedy, b.rows.last().unwrap().acc_greedy))
}

pub fn trend_rejection(seeds: u64) -> Check {
    guard(|| {
        let mut wins = 0;
        let mut detail = Vec::new();
        for s in 0..seeds {
            let r = trend_rejection_seed(s)?;
            let win = r.tv.0 < r.tv.1 && r.accuracy.0 >= r.accuracy.1 && r.samples.0 == r.samples.1 && r.event_mass <= 1e-3;
            wins += usize::from(win);
            detail.push(format!(
                "seed {s}: mass {:.1e}, tv {:.2e} vs {:.3}, acc {:.2} vs {:.2}",
                r.event_mass, r.tv.0, r.tv.1, r.accuracy.0, r.accuracy.1
            ));
        }
        let need = (seeds as usize * 4).div_ceil(5);
        Ok(Check { passed: wins >= need, measured: wins as f64, threshold: need as f64, instances: seeds as usize, detail: detail.join("; ") })
    })
}

pub fn trend_preference(seeds: u64) -> Check {
    guard(|| {
        let mut wins = 0;
        let mut detail = Vec::new();
        for s in 0..seeds {
            let (a, b) = trend_preference_seed(s)?;
            wins += usize::from(a >= b);
            detail.push(format!("seed {s}: acc {a:.2} vs {b:.2}"));
        }
        let need = (seeds as usize * 4).div_ceil(5);
        Ok(Check { passed: wins >= need, measured: wins as f64, threshold: need as f64, instances: seeds as usize, detail: detail.join("; ") })
    })
}

/// Small tabular experiment used by the determinism check.
pub fn determinism_config() -> crate::harness::config::ExperimentConfig {
    crate::harness::config::ExperimentConfig::parse(
        r#"
name = "determinism"
algorithm = "brite"
iterations = 4
seeds = [0, 1, 2]
posterior_samples = 8
estep = { kind = "planning", beta = 1.0 }
mstep = { kind = "weighted_mle", steps = 5, rate = 1.0 }

[task]
seed = 3
generator = { kind = "carry_addition", digits = 1, base = 4 }

[model]
features = { kind = "factored" }
init_scale = 0.5
"#,
    )
    .expect("built-in config parses")
}

/// Two executions with different worker counts give byte-identical tables.
pub fn determinism() -> Check {
    guard(|| {
        let cfg = determinism_config();
        let a = crate::harness::run::execute(&cfg, Some(1))?;
        let b = crate::harness::run::execute(&cfg, Some(4))?;
        let tables = |o: &crate::harness::run::RunOutcome| -> Vec<Option<String>> {
            o.seeds.iter().map(|s| s.error.is_none().then(|| s.record.to_tsv())).collect()
        };
        let (ta, tb) = (tables(&a), tables(&b));
        let differing = ta.iter().zip(&tb).filter(|(x, y)| x != y || x.is_none()).count();
        Ok(Check {
            passed: differing == 0,
            measured: differing as f64,
            threshold: 0.0,
            instances: ta.len(),
            detail: "seeds whose tables differ between 1 and 4 workers".into(),
        })
    })
}
