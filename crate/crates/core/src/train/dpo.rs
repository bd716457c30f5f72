//! Pairwise preference optimization over whole `(z, y)` outcomes and the
//! iterative loop that builds preference pairs from candidate draws.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::em::{empirical, greedy_accuracy};
use crate::error::{Error, Result};
use crate::estep::estep_planning;
use crate::math::{self, LOG_ZERO};
use crate::model::{FeatureMap, LogitModel};
use crate::rng;
use crate::task::{Evaluator, EventSpec, GenerativeTask, RewardShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: usize,
    pub preferred: usize,
    pub dispreferred: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpoOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `σ(m)` per pair, where `m` is the scaled log-ratio margin.
    pub sigmas: Vec<f64>,
    pub margins: Vec<f64>,
}

fn pair_logprob(lp: &[f64], pair: usize, which: &'static str) -> Result<f64> {
    let v = lp[pair];
    if !(v > LOG_ZERO / 2.0) {
        return Err(Error::ZeroProbabilityPair { which });
    }
    Ok(v)
}

/// Mean `−log σ(β[(log Q⁺ − log P⁺) − (log Q⁻ − log P⁻)])` and its gradient
/// in the policy weights.
pub fn latent_dpo_loss_and_grad(
    policy: &LogitModel,
    reference: &LogitModel,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<DpoOutput> {
    policy.features().check_compatible(reference.features())?;
    let task = policy.task();
    let mut grad = vec![0.0; policy.dim()];
    let mut sigmas = Vec::with_capacity(pairs.len());
    let mut margins = Vec::with_capacity(pairs.len());
    let mut loss = 0.0;
    if pairs.is_empty() {
        return Ok(DpoOutput { loss, grad, sigmas, margins });
    }
    let scale = 1.0 / pairs.len() as f64;
    for pr in pairs {
        task.check_prompt(pr.prompt)?;
        let lq = policy.log_probs(pr.prompt);
        let lp = reference.log_probs(pr.prompt);
        let m = beta
            * ((pair_logprob(&lq, pr.preferred, "policy")? - pair_logprob(&lp, pr.preferred, "reference")?)
                - (pair_logprob(&lq, pr.dispreferred, "policy")? - pair_logprob(&lp, pr.dispreferred, "reference")?));
        loss -= scale * math::log_sigmoid(m);
        let coef = -scale * math::sigmoid(-m) * beta;
        let mut w = vec![0.0; task.num_pairs()];
        w[pr.preferred] += coef;
        w[pr.dispreferred] -= coef;
        policy.accumulate_features(pr.prompt, &w, 1.0, &mut grad);
        sigmas.push(math::sigmoid(m));
        margins.push(m);
    }
    Ok(DpoOutput { loss, grad, sigmas, margins })
}

/// Where preference candidates come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateSource {
    /// Draws from the current model.
    ModelSample,
    /// Draws from the posterior of a softened verifier, `P(o = 1) = e^{−penalty}`
    /// for unverified outcomes, computed by planning.
    PosteriorSample { penalty: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefLoopConfig {
    pub iterations: usize,
    pub candidates: usize,
    pub source: CandidateSource,
    pub beta: f64,
    pub steps: usize,
    pub rate: f64,
}

impl PrefLoopConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::InvalidConfig { field: field.into(), reason: reason.into() });
        if self.candidates < 2 {
            return bad("candidates", "must be >= 2");
        }
        if !(self.beta > 0.0) {
            return bad("beta", "must be > 0");
        }
        if !(self.rate > 0.0) {
            return bad("rate", "must be > 0");
        }
        if let CandidateSource::PosteriorSample { penalty } = self.source {
            if !(penalty > 0.0) {
                return bad("source.penalty", "must be > 0");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefRow {
    pub t: usize,
    pub acc_greedy: f64,
    pub pairs: usize,
    pub skipped: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct PrefOutput {
    pub model: LogitModel,
    pub rows: Vec<PrefRow>,
}

/// Best verified and worst unverified candidate. Ties go to the higher (for
/// the winner) or lower (for the loser) model log-probability, then to the
/// smaller pair index.
pub fn select_pair(model: &LogitModel, x: usize, event: &EventSpec, candidates: &[usize]) -> Result<Option<PreferencePair>> {
    let task = model.task();
    let mask = task.event_mask(x, event)?;
    let lp = model.log_probs(x);
    let verified = |p: usize| {
        let (z, y) = task.split_pair(p);
        mask.contains_pair(z, y) && task.log_obs_mass(x, z, y, &mask.obs) == 0.0
    };
    let mut best: Option<usize> = None;
    let mut worst: Option<usize> = None;
    for &c in candidates {
        if verified(c) {
            if best.is_none_or(|b| lp[c] > lp[b] || (lp[c] == lp[b] && c < b)) {
                best = Some(c);
            }
        } else if worst.is_none_or(|w| lp[c] < lp[w] || (lp[c] == lp[w] && c < w)) {
            worst = Some(c);
        }
    }
    Ok(best.zip(worst).map(|(b, w)| PreferencePair { prompt: x, preferred: b, dispreferred: w }))
}

fn candidates(
    model: &LogitModel,
    x: usize,
    cfg: &PrefLoopConfig,
    soft: Option<&LogitModel>,
    seed: u64,
    t: usize,
) -> Result<Vec<usize>> {
    let mut r = rng::stream(seed, "preference", &[x as u64, t as u64]);
    match (&cfg.source, soft) {
        (CandidateSource::PosteriorSample { .. }, Some(soft)) => {
            let q = estep_planning(soft, x, &EventSpec::accepted(), 1.0)?.posterior.expect("planning returns a posterior");
            let counts = empirical(&q, cfg.candidates, &mut r);
            let mut out = Vec::with_capacity(cfg.candidates);
            for (p, c) in counts.iter().enumerate() {
                let k = (c * cfg.candidates as f64).round() as usize;
                out.extend(std::iter::repeat_n(p, k));
            }
            Ok(out)
        }
        _ => {
            let view = model.conditional_tables(x);
            Ok((0..cfg.candidates).map(|_| view.sample(&mut r)).collect())
        }
    }
}

/// Task used to draw posterior candidates, when the source needs one.
pub fn softened_task(task: &GenerativeTask, source: &CandidateSource) -> Result<Option<Arc<GenerativeTask>>> {
    match source {
        CandidateSource::PosteriorSample { penalty } => {
            let Evaluator::BinaryVerifier { scope } = task.evaluator() else {
                return Err(Error::RequiresBinaryVerifier("posterior candidates"));
            };
            let shape = RewardShape::Verified { scope: *scope, penalty: *penalty };
            Ok(Some(Arc::new(task.with_evaluator(Evaluator::SoftReward { beta: 1.0, shape })?)))
        }
        CandidateSource::ModelSample => Ok(None),
    }
}

/// One round: draw candidates, select pairs, then take `steps` full-batch
/// gradient steps with the incoming model as the reference.
pub fn pref_round(
    model: &LogitModel,
    event: &EventSpec,
    cfg: &PrefLoopConfig,
    soft_task: Option<&Arc<GenerativeTask>>,
    seed: u64,
    t: usize,
) -> Result<(LogitModel, PrefRow)> {
    let task = model.task();
    let soft = soft_task
        .map(|st| {
            let fm = FeatureMap::new(st.clone(), model.features().kind().clone())?;
            LogitModel::from_parts(Arc::new(fm), model.weights().to_vec())
        })
        .transpose()?;
    let mut pairs = Vec::new();
    for x in 0..task.num_prompts() {
        let cands = candidates(model, x, cfg, soft.as_ref(), seed, t)?;
        if let Some(p) = select_pair(model, x, event, &cands)? {
            pairs.push(p);
        }
    }
    let skipped = task.num_prompts() - pairs.len();
    let mut cur = model.clone();
    let mut loss = f64::NAN;
    if !pairs.is_empty() {
        for _ in 0..cfg.steps {
            let out = latent_dpo_loss_and_grad(&cur, model, &pairs, cfg.beta)?;
            loss = out.loss;
            let w: Vec<f64> = cur.weights().iter().zip(&out.grad).map(|(w, g)| w - cfg.rate * g).collect();
            cur = cur.with_weights(w);
        }
    }
    let row = PrefRow { t, acc_greedy: greedy_accuracy(&cur), pairs: pairs.len(), skipped, loss };
    Ok((cur, row))
}

/// Iterative preference optimization over `cfg.iterations` rounds.
pub fn iterative_pref_loop(model: &LogitModel, event: &EventSpec, cfg: &PrefLoopConfig, seed: u64) -> Result<PrefOutput> {
    cfg.validate()?;
    if !model.task().is_hard() {
        return Err(Error::RequiresBinaryVerifier("preference loop"));
    }
    let soft_task = softened_task(model.task(), &cfg.source)?;
    let mut cur = model.clone();
    let mut rows = vec![PrefRow { t: 0, acc_greedy: greedy_accuracy(&cur), pairs: 0, skipped: 0, loss: f64::NAN }];
    for t in 1..=cfg.iterations {
        let (next, row) = pref_round(&cur, event, cfg, soft_task.as_ref(), seed, t)?;
        rows.push(row);
        cur = next;
    }
    Ok(PrefOutput { model: cur, rows })
}
