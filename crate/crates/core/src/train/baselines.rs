//! Sample-and-refit baselines expressed as special cases of the EM update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mstep::{mstep, MStepSpec};
use crate::error::{Error, Result};
use crate::estep::estep_rejection;
use crate::math::{self, LOG_ZERO};
use crate::model::LogitModel;
use crate::rng;
use crate::task::{Evaluator, EventSpec, TaskKind};

/// How the per-prompt fitting distribution is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// `N` model draws per prompt.
    Budget(usize),
    /// The exact expectation the draws estimate.
    ExactWeights,
}

#[derive(Clone, Debug)]
pub struct UpdateOutcome {
    pub model: LogitModel,
    pub posteriors: Vec<Option<Vec<f64>>>,
    /// Prompts with nothing to fit.
    pub skipped: usize,
    /// Some prompt put more than 0.999 of its weight on one pair.
    pub degenerate: bool,
    pub samples: usize,
}

fn finish(model: &LogitModel, posteriors: Vec<Option<Vec<f64>>>, spec: &MStepSpec, samples: usize) -> Result<UpdateOutcome> {
    let skipped = posteriors.iter().filter(|q| q.is_none()).count();
    let degenerate = posteriors.iter().flatten().any(|q| q.iter().any(|&w| w > 0.999));
    let new = mstep(model, &posteriors, spec)?;
    Ok(UpdateOutcome { model: new, posteriors, skipped, degenerate, samples })
}

fn normalize(w: Vec<f64>) -> Option<Vec<f64>> {
    let s: f64 = w.iter().sum();
    (s > 0.0).then(|| w.into_iter().map(|v| v / s).collect())
}

/// Keep only verified draws and refit. Prompts with no verified draw are
/// skipped; if every prompt is skipped the model is returned unchanged.
pub fn filter_sft_update(
    model: &LogitModel,
    event: &EventSpec,
    sampling: Sampling,
    spec: &MStepSpec,
    seed: u64,
    t: u64,
) -> Result<UpdateOutcome> {
    let task = model.task();
    if !task.is_hard() {
        return Err(Error::RequiresBinaryVerifier("filter_sft"));
    }
    let mut samples = 0;
    let mut posteriors = Vec::with_capacity(task.num_prompts());
    for x in 0..task.num_prompts() {
        let q = match sampling {
            Sampling::Budget(n) => {
                samples += n;
                estep_rejection(model, x, event, n, &mut rng::stream(seed, "filter_sft", &[x as u64, t]))?.posterior
            }
            Sampling::ExactWeights => {
                let mask = task.event_mask(x, event)?;
                let p = model.probs(x);
                let w = (0..task.num_pairs())
                    .map(|i| {
                        let (z, y) = task.split_pair(i);
                        let ok = mask.contains_pair(z, y) && task.log_obs_mass(x, z, y, &mask.obs) == 0.0;
                        if ok {
                            p[i]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                normalize(w)
            }
        };
        posteriors.push(q);
    }
    finish(model, posteriors, spec, samples)
}

/// Reward-weighted refit with weights `exp(R / β)`, self-normalized per prompt.
pub fn restem_update(
    model: &LogitModel,
    reward: &dyn Fn(usize, usize, usize) -> f64,
    beta: f64,
    sampling: Sampling,
    spec: &MStepSpec,
    seed: u64,
    t: u64,
) -> Result<UpdateOutcome> {
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig { field: "beta".into(), reason: "must be > 0".into() });
    }
    let task = model.task();
    let mut samples = 0;
    let mut posteriors = Vec::with_capacity(task.num_prompts());
    for x in 0..task.num_prompts() {
        let lp = model.log_probs(x);
        let mut logw = vec![f64::NEG_INFINITY; task.num_pairs()];
        match sampling {
            Sampling::Budget(n) => {
                samples += n;
                let view = model.conditional_tables(x);
                let mut r = rng::stream(seed, "restem", &[x as u64, t]);
                let mut counts = vec![0usize; task.num_pairs()];
                for _ in 0..n {
                    counts[view.sample(&mut r)] += 1;
                }
                for (i, &c) in counts.iter().enumerate().filter(|(_, c)| **c > 0) {
                    let (z, y) = task.split_pair(i);
                    logw[i] = (c as f64).ln() + reward(x, z, y) / beta;
                }
            }
            Sampling::ExactWeights => {
                for (i, l) in lp.iter().enumerate() {
                    let (z, y) = task.split_pair(i);
                    logw[i] = l + reward(x, z, y) / beta;
                }
            }
        }
        posteriors.push(logw.iter().any(|v| v.is_finite()).then(|| math::softmax(&logw)));
    }
    finish(model, posteriors, spec, samples)
}

/// [`restem_update`] with the task's own soft reward and temperature.
pub fn restem_task_update(model: &LogitModel, sampling: Sampling, spec: &MStepSpec, seed: u64, t: u64) -> Result<UpdateOutcome> {
    let task = model.task().clone();
    let Evaluator::SoftReward { beta, .. } = task.evaluator() else {
        return Err(Error::RequiresSoftReward("restem"));
    };
    let reward = |x, z, y| task.soft_reward(x, z, y).unwrap_or(0.0);
    restem_update(model, &reward, *beta, sampling, spec, seed, t)
}

/// One `(prompt, tag, response)` training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedExample {
    pub prompt: usize,
    pub tag: usize,
    pub response: usize,
}

fn require_tagged(model: &LogitModel) -> Result<()> {
    match model.task().spec().generator {
        TaskKind::Tagged { .. } => Ok(()),
        _ => Err(Error::InvalidTask("tag-conditioned training needs a tagged task".into())),
    }
}

/// Draw `budget` responses per prompt from the model's response marginal and
/// label each with `tagger(x, y)`.
pub fn tag_corpus(
    model: &LogitModel,
    budget: usize,
    seed: u64,
    t: u64,
    tagger: impl Fn(usize, usize) -> usize,
) -> Result<Vec<TaggedExample>> {
    require_tagged(model)?;
    let task = model.task();
    let mut out = Vec::new();
    for x in 0..task.num_prompts() {
        let p = model.probs(x);
        let marg: Vec<f64> = (0..task.num_responses())
            .map(|y| (0..task.num_latents()).map(|z| p[task.pair_index(z, y)]).sum())
            .collect();
        let mut r = rng::stream(seed, "tag_corpus", &[x as u64, t]);
        for _ in 0..budget {
            let u = r.gen::<f64>();
            let mut acc = 0.0;
            let mut y = marg.len() - 1;
            for (i, m) in marg.iter().enumerate() {
                acc += m;
                if u < acc {
                    y = i;
                    break;
                }
            }
            let tag = tagger(x, y);
            task.check_pair(tag, y)?;
            out.push(TaggedExample { prompt: x, tag, response: y });
        }
    }
    Ok(out)
}

/// Maximum-likelihood fit of `P(tag, y | x)` to the corpus.
pub fn conditional_sft_update(model: &LogitModel, corpus: &[TaggedExample], spec: &MStepSpec) -> Result<UpdateOutcome> {
    require_tagged(model)?;
    let task = model.task();
    let mut counts = vec![vec![0.0; task.num_pairs()]; task.num_prompts()];
    for e in corpus {
        task.check_prompt(e.prompt)?;
        task.check_pair(e.tag, e.response)?;
        counts[e.prompt][task.pair_index(e.tag, e.response)] += 1.0;
    }
    let posteriors = counts.into_iter().map(normalize).collect();
    finish(model, posteriors, spec, corpus.len())
}

/// `P(y | x, tag)` over responses.
pub fn generate_with_tag(model: &LogitModel, x: usize, tag: usize) -> Result<Vec<f64>> {
    require_tagged(model)?;
    let task = model.task();
    task.check_prompt(x)?;
    if tag >= task.num_latents() {
        return Err(Error::OutOfSpace { what: "tag", index: tag, size: task.num_latents() });
    }
    let lp = model.log_probs(x);
    let row: Vec<f64> = (0..task.num_responses()).map(|y| lp[task.pair_index(tag, y)]).collect();
    if math::logsumexp(&row) <= LOG_ZERO / 2.0 {
        return Err(Error::UnseenTag { prompt: x, tag });
    }
    Ok(math::softmax(&row))
}

/// Argmax response under [`generate_with_tag`].
pub fn greedy_with_tag(model: &LogitModel, x: usize, tag: usize) -> Result<usize> {
    let p = generate_with_tag(model, x, tag)?;
    Ok(p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::em::{brite_iterate, BriteConfig};
    use crate::model::FeatureKind;
    use crate::task::{random_task, EvaluatorSpec, GenerativeTask, TaskSpec, VerifierScope};
    use std::sync::Arc;

    fn carry(evaluator: EvaluatorSpec) -> Arc<GenerativeTask> {
        Arc::new(TaskSpec::new(TaskKind::CarryAddition { digits: 1, base: 3 }, 0, evaluator).build().unwrap())
    }

    fn max_weight_diff(a: &LogitModel, b: &LogitModel) -> f64 {
        a.weights().iter().zip(b.weights()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn exact_filter_sft_is_an_em_step() {
        let t = carry(EvaluatorSpec::Verifier { scope: VerifierScope::Answer });
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 7).unwrap();
        let ev = EventSpec::accepted();
        let f = filter_sft_update(&m, &ev, Sampling::ExactWeights, &MStepSpec::ClosedForm, 0, 1).unwrap();
        let (b, _) = brite_iterate(&m, &ev, &BriteConfig::exact(1, MStepSpec::ClosedForm), 0, 1, None).unwrap();
        for x in 0..m.task().num_prompts() {
            assert!(math::total_variation(&f.model.probs(x), &b.probs(x)) <= 1e-10);
        }
    }

    #[test]
    fn filter_sft_without_acceptances_is_a_no_op() {
        let t = Arc::new(random_task(2, 6, 6, 3, EvaluatorSpec::RandomHard { accept_prob: 0.0 }).unwrap());
        let m = LogitModel::zeros(t, FeatureKind::Tabular).unwrap();
        let ev = EventSpec { response: crate::task::Subset::NotGold, ..EventSpec::accepted() };
        let f = filter_sft_update(&m, &ev, Sampling::Budget(20), &MStepSpec::ClosedForm, 0, 1).unwrap();
        assert_eq!(f.skipped, 2);
        assert_eq!(f.model.weights(), m.weights());
    }

    #[test]
    fn filter_sft_needs_a_hard_verifier() {
        let t = carry(EvaluatorSpec::SoftMismatch { beta: 1.0, penalty: 1.0 });
        let m = LogitModel::zeros(t, FeatureKind::Tabular).unwrap();
        let r = filter_sft_update(&m, &EventSpec::accepted(), Sampling::ExactWeights, &MStepSpec::ClosedForm, 0, 1);
        assert!(matches!(r, Err(Error::RequiresBinaryVerifier(_))));
    }

    #[test]
    fn exact_restem_is_an_em_step() {
        let t = carry(EvaluatorSpec::SoftMismatch { beta: 0.7, penalty: 1.0 });
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 2).unwrap();
        let ev = EventSpec::accepted();
        let r = restem_task_update(&m, Sampling::ExactWeights, &MStepSpec::ClosedForm, 0, 1).unwrap();
        let (b, _) = brite_iterate(&m, &ev, &BriteConfig::exact(1, MStepSpec::ClosedForm), 0, 1, None).unwrap();
        for x in 0..m.task().num_prompts() {
            assert!(math::total_variation(&r.model.probs(x), &b.probs(x)) <= 1e-10);
        }
    }

    #[test]
    fn constant_reward_is_a_fixed_point() {
        let t = carry(EvaluatorSpec::SoftMismatch { beta: 1.0, penalty: 1.0 });
        let m = LogitModel::random(t, FeatureKind::Tabular, 1.0, 2).unwrap();
        let r = restem_update(&m, &|_, _, _| -2.0, 0.5, Sampling::ExactWeights, &MStepSpec::ClosedForm, 0, 1).unwrap();
        assert!(max_weight_diff(&r.model, &m) < 1e-10);
        assert!(!r.degenerate);
    }

    #[test]
    fn cold_weights_are_flagged_degenerate() {
        let t = carry(EvaluatorSpec::SoftMismatch { beta: 1.0, penalty: 1.0 });
        let m = LogitModel::zeros(t.clone(), FeatureKind::Tabular).unwrap();
        let reward = |x, z, y| t.soft_reward(x, z, y).unwrap();
        let r = restem_update(&m, &reward, 0.01, Sampling::Budget(30), &MStepSpec::ClosedForm, 0, 1).unwrap();
        assert!(r.degenerate);
        let warm = restem_update(&m, &reward, 100.0, Sampling::Budget(30), &MStepSpec::ClosedForm, 0, 1).unwrap();
        assert!(!warm.degenerate);
    }

    #[test]
    fn restem_needs_soft_reward() {
        let t = carry(EvaluatorSpec::default());
        let m = LogitModel::zeros(t, FeatureKind::Tabular).unwrap();
        let r = restem_task_update(&m, Sampling::ExactWeights, &MStepSpec::ClosedForm, 0, 1);
        assert!(matches!(r, Err(Error::RequiresSoftReward(_))));
    }

    fn tagged() -> Arc<GenerativeTask> {
        let kind = TaskKind::Tagged { inner: Box::new(TaskKind::CarryAddition { digits: 1, base: 3 }), num_tags: 2 };
        Arc::new(TaskSpec::new(kind, 0, EvaluatorSpec::default()).build().unwrap())
    }

    #[test]
    fn top_tag_generation_recovers_correct_answers() {
        let t = tagged();
        let m = LogitModel::zeros(t.clone(), FeatureKind::Tabular).unwrap();
        let corpus = tag_corpus(&m, 200, 4, 0, |x, y| usize::from(t.is_correct_answer(x, y))).unwrap();
        let out = conditional_sft_update(&m, &corpus, &MStepSpec::ClosedForm).unwrap();
        for x in 0..t.num_prompts() {
            let y = greedy_with_tag(&out.model, x, 1).unwrap();
            assert!(t.is_correct_answer(x, y));
        }
    }

    #[test]
    fn unseen_tag_is_an_error() {
        let t = tagged();
        let m = LogitModel::zeros(t.clone(), FeatureKind::Tabular).unwrap();
        let corpus: Vec<_> = (0..t.num_prompts()).map(|x| TaggedExample { prompt: x, tag: 0, response: 0 }).collect();
        let out = conditional_sft_update(&m, &corpus, &MStepSpec::ClosedForm).unwrap();
        assert!(matches!(generate_with_tag(&out.model, 0, 1), Err(Error::UnseenTag { prompt: 0, tag: 1 })));
        let plain = LogitModel::zeros(carry(EvaluatorSpec::default()), FeatureKind::Tabular).unwrap();
        assert!(conditional_sft_update(&plain, &corpus, &MStepSpec::ClosedForm).is_err());
    }
}
