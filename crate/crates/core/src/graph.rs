//! The joint model `P(z, y, o | x, θ) = P(z, y | x, θ) · P(o | x, z, y)`, its
//! event objective, exact posterior, evidence lower bound and gradient.
//!
//! Every quantity here is an exact sum over the enumerated event; nothing is
//! sampled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, logsumexp};
use crate::model::LogitModel;
use crate::task::{enumerate_event, EventMask, EventSpec, GenerativeTask, Triple};

/// A sequence model together with its task's evaluator.
#[derive(Clone, Copy, Debug)]
pub struct JointModel<'a> {
    pub seq: &'a LogitModel,
}

/// Normalized posterior over the event support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub prompt: usize,
    pub support: Vec<Triple>,
    pub probs: Vec<f64>,
    /// `log Σ_event P(z, y, o | x, θ)`.
    pub log_normalizer: f64,
}

impl PosteriorTable {
    /// `(z, y)` marginal as a dense vector over pair indices.
    pub fn pair_marginal(&self, task: &GenerativeTask) -> Vec<f64> {
        let mut out = vec![0.0; task.num_pairs()];
        for (t, &p) in self.support.iter().zip(&self.probs) {
            out[task.pair_index(t.latent, t.response)] += p;
        }
        out
    }

    /// Rows `(z tokens, y tokens, o, probability)`, tab-separated.
    pub fn to_rows(&self, task: &GenerativeTask) -> Vec<String> {
        let v = task.vocab();
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(t, p)| {
                format!(
                    "{}\t{}\t{}\t{:.17e}",
                    v.render(task.latents()[t.latent].ids()),
                    v.render(task.responses()[t.response].ids()),
                    t.obs,
                    p
                )
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboReport {
    pub elbo: f64,
    pub objective: f64,
    /// `objective − elbo`; equals `KL(q ‖ posterior)`.
    pub gap: f64,
}

impl<'a> JointModel<'a> {
    pub fn new(seq: &'a LogitModel) -> Self {
        JointModel { seq }
    }

    pub fn task(&self) -> &'a GenerativeTask {
        self.seq.task()
    }

    pub fn joint_prob(&self, x: usize, z: usize, y: usize, o: usize) -> Result<f64> {
        let t = self.task();
        if o >= t.obs_size() {
            return Err(Error::OutOfSpace { what: "observation", index: o, size: t.obs_size() });
        }
        Ok(self.seq.joint_logprob(x, z, y)?.exp() * t.obs_prob(x, z, y, o))
    }

    /// `log P(z, y | x) + log P(o ∈ Ô | x, z, y)` for every pair, `-inf` off the event.
    pub fn event_log_masses(&self, x: usize, mask: &EventMask) -> Vec<f64> {
        let logits = self.seq.logits(x);
        let a = logsumexp(&logits);
        let mut out = self.unnormalized_event_logits(x, mask, &logits);
        out.iter_mut().for_each(|v| *v -= a);
        out
    }

    fn unnormalized_event_logits(&self, x: usize, mask: &EventMask, logits: &[f64]) -> Vec<f64> {
        let t = self.task();
        let mut out = vec![f64::NEG_INFINITY; t.num_pairs()];
        for &z in &mask.latents {
            for &y in &mask.responses {
                let p = t.pair_index(z, y);
                out[p] = logits[p] + t.log_obs_mass(x, z, y, &mask.obs);
            }
        }
        out
    }

    /// `ℒ_x(θ) = log Σ_event P(z, y, o | x, θ)`; `-inf` when the event has no mass.
    pub fn event_logprob(&self, x: usize, event: &EventSpec) -> Result<f64> {
        let mask = self.task().event_mask(x, event)?;
        let logits = self.seq.logits(x);
        let num = logsumexp(&self.unnormalized_event_logits(x, &mask, &logits));
        Ok(num - logsumexp(&logits))
    }

    /// ρ-weighted mean of the per-prompt objectives.
    pub fn objective(&self, event: &EventSpec) -> Result<f64> {
        let t = self.task();
        let mut acc = 0.0;
        for x in 0..t.num_prompts() {
            let w = t.prompt(x).weight;
            if w > 0.0 {
                acc += w * self.event_logprob(x, event)?;
            }
        }
        Ok(acc)
    }

    pub fn exact_posterior(&self, x: usize, event: &EventSpec) -> Result<PosteriorTable> {
        let t = self.task();
        let support = enumerate_event(t, x, event)?;
        let lp = self.seq.log_probs(x);
        let logs: Vec<f64> = support
            .iter()
            .map(|tr| {
                let po = t.obs_prob(x, tr.latent, tr.response, tr.obs);
                if po > 0.0 {
                    lp[t.pair_index(tr.latent, tr.response)] + po.ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let log_normalizer = logsumexp(&logs);
        if log_normalizer == f64::NEG_INFINITY {
            return Err(Error::ZeroMassEvent { prompt: x });
        }
        let probs = logs.iter().map(|l| (l - log_normalizer).exp()).collect();
        Ok(PosteriorTable { prompt: x, support, probs, log_normalizer })
    }

    /// `Σ q log P(z, y, o | x) − Σ q log q` for `q` aligned with the event enumeration.
    pub fn elbo(&self, x: usize, event: &EventSpec, variational: &[f64]) -> Result<ElboReport> {
        let t = self.task();
        let support = enumerate_event(t, x, event)?;
        if variational.len() != support.len() {
            return Err(Error::UnnormalizedVariational { sum: f64::NAN });
        }
        let sum: f64 = variational.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || variational.iter().any(|&q| q < 0.0) {
            return Err(Error::UnnormalizedVariational { sum });
        }
        let lp = self.seq.log_probs(x);
        let mut elbo = 0.0;
        for (tr, &q) in support.iter().zip(variational) {
            if q > 0.0 {
                let po = t.obs_prob(x, tr.latent, tr.response, tr.obs);
                let lj = if po > 0.0 { lp[t.pair_index(tr.latent, tr.response)] + po.ln() } else { f64::NEG_INFINITY };
                elbo += q * (lj - q.ln());
            }
        }
        let objective = self.event_logprob(x, event)?;
        Ok(ElboReport { elbo, objective, gap: objective - elbo })
    }

    /// `∇ℒ_x = E_Q[φ] − E_P[φ]`.
    pub fn grad_event_logprob(&self, x: usize, event: &EventSpec) -> Result<Vec<f64>> {
        let t = self.task();
        let q = self.exact_posterior(x, event)?.pair_marginal(t);
        let p = self.seq.probs(x);
        let diff: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
        let mut g = vec![0.0; self.seq.dim()];
        self.seq.accumulate_features(x, &diff, 1.0, &mut g);
        Ok(g)
    }

    /// Gradient of the ρ-weighted objective.
    pub fn objective_gradient(&self, event: &EventSpec) -> Result<Vec<f64>> {
        let t = self.task();
        let mut g = vec![0.0; self.seq.dim()];
        for x in 0..t.num_prompts() {
            let w = t.prompt(x).weight;
            if w == 0.0 {
                continue;
            }
            let q = self.exact_posterior(x, event)?.pair_marginal(t);
            let p = self.seq.probs(x);
            let diff: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
            self.seq.accumulate_features(x, &diff, w, &mut g);
        }
        Ok(g)
    }
}

/// Probability of the event under the model, `exp(ℒ_x)`.
pub fn event_mass(model: &LogitModel, x: usize, event: &EventSpec) -> Result<f64> {
    Ok(JointModel::new(model).event_logprob(x, event)?.exp())
}

/// `max_x TV` between two dense per-prompt pair distributions.
pub fn max_tv(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| math::total_variation(p, q)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FeatureKind;
    use crate::task::{random_task, EvaluatorSpec, Subset, TaskKind, TaskSpec, VerifierScope, OBS_ACCEPT};
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::Arc;

    fn carry(d: usize, b: usize) -> Arc<GenerativeTask> {
        Arc::new(
            TaskSpec::new(TaskKind::CarryAddition { digits: d, base: b }, 0, EvaluatorSpec::default())
                .build()
                .unwrap(),
        )
    }

    #[test]
    fn uniform_joint_on_accepted_pair() {
        let t = Arc::new(
            random_task(1, 2, 2, 3, EvaluatorSpec::Verifier { scope: VerifierScope::AnswerAndTrace }).unwrap(),
        );
        let m = LogitModel::zeros(t.clone(), FeatureKind::Tabular).unwrap();
        let jm = JointModel::new(&m);
        let p = t.prompt(0);
        assert_eq!(jm.joint_prob(0, p.gold_latent, p.gold_response, OBS_ACCEPT).unwrap(), 0.25);
        let mut s = 0.0;
        for z in 0..2 {
            for y in 0..2 {
                for o in 0..2 {
                    s += jm.joint_prob(0, z, y, o).unwrap();
                }
            }
        }
        assert!((s - 1.0).abs() < 1e-10);
    }

    #[test]
    fn full_event_has_log_one() {
        let m = LogitModel::random(carry(1, 3), FeatureKind::Tabular, 1.0, 1).unwrap();
        assert_eq!(JointModel::new(&m).event_logprob(0, &EventSpec::full()).unwrap(), 0.0);
    }

    #[test]
    fn accepted_event_under_uniform_model_counts_verified_pairs() {
        let t = carry(1, 3);
        let m = LogitModel::zeros(t.clone(), FeatureKind::Tabular).unwrap();
        let jm = JointModel::new(&m);
        for x in 0..t.num_prompts() {
            let mut k = 0;
            for z in 0..t.num_latents() {
                for y in 0..t.num_responses() {
                    k += (t.obs_prob(x, z, y, OBS_ACCEPT) == 1.0) as usize;
                }
            }
            let expect = (k as f64 / t.num_pairs() as f64).ln();
            assert!((jm.event_logprob(x, &EventSpec::accepted()).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_event_gives_negative_infinity() {
        let t = carry(1, 2);
        let m = LogitModel::zeros(t, FeatureKind::Tabular).unwrap();
        let ev = EventSpec { latent: Subset::All, response: Subset::NotGold, obs: Subset::Gold };
        let jm = JointModel::new(&m);
        assert_eq!(jm.event_logprob(0, &ev).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(jm.exact_posterior(0, &ev), Err(Error::ZeroMassEvent { .. })));
    }

    #[test]
    fn two_element_posterior_normalizes_masses() {
        // masses 0.2 and 0.3 from a three-outcome model with logits ln(.2), ln(.3), ln(.5)
        let t = Arc::new(random_task(1, 3, 1, 0, EvaluatorSpec::Verifier { scope: VerifierScope::Answer }).unwrap());
        let m = LogitModel::zeros(t.clone(), FeatureKind::Tabular).unwrap();
        let m = m.with_weights(vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()]);
        let ev = EventSpec { latent: Subset::Indices(vec![0, 1]), response: Subset::All, obs: Subset::Gold };
        let post = JointModel::new(&m).exact_posterior(0, &ev).unwrap();
        assert!((post.probs[0] - 0.4).abs() < 1e-15);
        assert!((post.probs[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn singleton_event_is_point_mass() {
        let t = carry(1, 2);
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 3).unwrap();
        let ev = EventSpec { latent: Subset::Gold, response: Subset::Gold, obs: Subset::Gold };
        let post = JointModel::new(&m).exact_posterior(1, &ev).unwrap();
        assert_eq!(post.probs, vec![1.0]);
    }

    #[test]
    fn point_mass_variational_elbo_is_log_probability() {
        let t = carry(1, 2);
        let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 1.0, 4).unwrap();
        let jm = JointModel::new(&m);
        let post = jm.exact_posterior(2, &EventSpec::full()).unwrap();
        let best = (0..post.probs.len()).max_by(|&a, &b| post.probs[a].total_cmp(&post.probs[b])).unwrap();
        let mut q = vec![0.0; post.probs.len()];
        q[best] = 1.0;
        let tr = post.support[best];
        let r = jm.elbo(2, &EventSpec::full(), &q).unwrap();
        let direct = jm.joint_prob(2, tr.latent, tr.response, tr.obs).unwrap().ln();
        assert!((r.elbo - direct).abs() < 1e-12);
    }

    #[test]
    fn elbo_rejects_unnormalized_variational() {
        let m = LogitModel::zeros(carry(1, 2), FeatureKind::Tabular).unwrap();
        let n = enumerate_event(m.task(), 0, &EventSpec::full()).unwrap().len();
        let q = vec![1.0 / n as f64 + 1e-6; n];
        assert!(matches!(
            JointModel::new(&m).elbo(0, &EventSpec::full(), &q),
            Err(Error::UnnormalizedVariational { .. })
        ));
    }

    #[test]
    fn full_event_gradient_is_zero() {
        let m = LogitModel::random(carry(1, 2), FeatureKind::Factored, 2.0, 5).unwrap();
        let g = JointModel::new(&m).grad_event_logprob(0, &EventSpec::full()).unwrap();
        assert!(math::max_abs(&g) < 1e-15);
    }

    #[test]
    fn tabular_gradient_is_posterior_minus_model() {
        let t = carry(1, 2);
        let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 1.0, 6).unwrap();
        let jm = JointModel::new(&m);
        let g = jm.grad_event_logprob(1, &EventSpec::gold_answer()).unwrap();
        let q = jm.exact_posterior(1, &EventSpec::gold_answer()).unwrap().pair_marginal(&t);
        let p = m.probs(1);
        let n = t.num_pairs();
        for k in 0..n {
            assert!((g[n + k] - (q[k] - p[k])).abs() < 1e-15);
        }
        assert!(g[..n].iter().all(|&v| v == 0.0));
    }

    fn soft_task(seed: u64) -> Arc<GenerativeTask> {
        Arc::new(random_task(2, 4, 3, seed, EvaluatorSpec::RandomTable { obs_size: 3 }).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn factorization_is_theta_independent(seed in any::<u64>()) {
            let t = soft_task(seed);
            let a = LogitModel::random(t.clone(), FeatureKind::Factored, 2.0, seed).unwrap();
            let b = LogitModel::random(t.clone(), FeatureKind::Factored, 2.0, seed ^ 7).unwrap();
            for x in 0..2 {
                for z in 0..4 {
                    for y in 0..3 {
                        for o in 0..3 {
                            let ra = JointModel::new(&a).joint_prob(x, z, y, o).unwrap() / a.joint_logprob(x, z, y).unwrap().exp();
                            let rb = JointModel::new(&b).joint_prob(x, z, y, o).unwrap() / b.joint_logprob(x, z, y).unwrap().exp();
                            prop_assert!((ra - rb).abs() <= 1e-12);
                        }
                    }
                }
            }
        }

        #[test]
        fn posterior_times_normalizer_recovers_joint(seed in any::<u64>()) {
            let t = soft_task(seed);
            let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 2.0, seed).unwrap();
            let jm = JointModel::new(&m);
            let ev = EventSpec { latent: Subset::All, response: Subset::All, obs: Subset::Indices(vec![0, 2]) };
            let post = jm.exact_posterior(1, &ev).unwrap();
            prop_assert!((post.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (tr, q) in post.support.iter().zip(&post.probs) {
                let joint = jm.joint_prob(1, tr.latent, tr.response, tr.obs).unwrap();
                prop_assert!((q * post.log_normalizer.exp() - joint).abs() <= 1e-12);
            }
        }

        #[test]
        fn scaling_masses_leaves_posterior_unchanged(seed in any::<u64>(), c in -20.0f64..20.0) {
            let t = soft_task(seed);
            let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 2.0, seed).unwrap();
            let w: Vec<f64> = m.weights().iter().map(|v| v + c).collect();
            let shifted = m.with_weights(w);
            let a = JointModel::new(&m).exact_posterior(0, &EventSpec::accepted()).unwrap();
            let b = JointModel::new(&shifted).exact_posterior(0, &EventSpec::accepted()).unwrap();
            for (p, q) in a.probs.iter().zip(&b.probs) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }

        #[test]
        fn elbo_bounded_with_gap_equal_to_kl(seed in any::<u64>()) {
            let t = soft_task(seed);
            let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 2.0, seed).unwrap();
            let jm = JointModel::new(&m);
            let ev = EventSpec::accepted();
            let post = jm.exact_posterior(0, &ev).unwrap();
            let n = post.probs.len();
            let uniform = vec![1.0 / n as f64; n];
            let r = jm.elbo(0, &ev, &uniform).unwrap();
            prop_assert!(r.gap >= -1e-10);
            prop_assert!((r.gap - math::kl_divergence(&uniform, &post.probs)).abs() <= 1e-10);
            let exact = jm.elbo(0, &ev, &post.probs).unwrap();
            prop_assert!(exact.gap.abs() <= 1e-10);
            let mut r2 = crate::rng::stream(seed, "elbo", &[]);
            let raw: Vec<f64> = (0..n).map(|_| r2.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
            prop_assert!(jm.elbo(0, &ev, &q).unwrap().elbo <= exact.objective + 1e-10);
        }
    }
}
