//! Maximization step: fit `θ` to per-prompt posteriors `Q(·, · | x)` by
//! maximizing `S(θ) = Σ_x ρ(x) Σ_{z,y} Q(z, y | x) log P(z, y | x, θ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, LOG_ZERO};
use crate::model::LogitModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MStepSpec {
    /// Set `P(·|x, θ) = Q(·|x)` exactly; tabular features only.
    ClosedForm,
    /// Exact-gradient ascent on `S`, halving the rate on any decrease.
    GradientAscent { steps: usize, rate: f64 },
    /// Fixed-rate gradient steps on the weighted log-likelihood of samples.
    WeightedMle { steps: usize, rate: f64 },
}

impl MStepSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            MStepSpec::ClosedForm => Ok(()),
            MStepSpec::GradientAscent { steps, rate } | MStepSpec::WeightedMle { steps, rate } => {
                if *steps < 1 {
                    return Err(Error::InvalidConfig { field: "mstep.steps".into(), reason: "must be >= 1".into() });
                }
                if !(*rate > 0.0) {
                    return Err(Error::InvalidConfig { field: "mstep.rate".into(), reason: "must be > 0".into() });
                }
                Ok(())
            }
        }
    }
}

const MAX_HALVINGS: usize = 40;

/// `S(θ)`; prompts with `None` are skipped.
pub fn surrogate(model: &LogitModel, posteriors: &[Option<Vec<f64>>]) -> f64 {
    let t = model.task();
    let mut acc = 0.0;
    for (x, q) in posteriors.iter().enumerate() {
        let Some(q) = q else { continue };
        let lp = model.log_probs(x);
        let s: f64 = q.iter().zip(&lp).filter(|(q, _)| **q > 0.0).map(|(q, l)| q * l).sum();
        acc += t.prompt(x).weight * s;
    }
    acc
}

/// `∇S(θ) = Σ_x ρ(x) (E_Q[φ] − E_P[φ])`.
pub fn surrogate_gradient(model: &LogitModel, posteriors: &[Option<Vec<f64>>]) -> Vec<f64> {
    let t = model.task();
    let mut g = vec![0.0; model.dim()];
    for (x, q) in posteriors.iter().enumerate() {
        let Some(q) = q else { continue };
        let p = model.probs(x);
        let diff: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
        model.accumulate_features(x, &diff, t.prompt(x).weight, &mut g);
    }
    g
}

fn check_posteriors(model: &LogitModel, posteriors: &[Option<Vec<f64>>]) -> Result<()> {
    let t = model.task();
    if posteriors.len() != t.num_prompts() {
        return Err(Error::MismatchedTask(format!(
            "{} posteriors for {} prompts",
            posteriors.len(),
            t.num_prompts()
        )));
    }
    for q in posteriors.iter().flatten() {
        let sum: f64 = q.iter().sum();
        if q.len() != t.num_pairs() || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::UnnormalizedVariational { sum });
        }
    }
    Ok(())
}

pub fn mstep(model: &LogitModel, posteriors: &[Option<Vec<f64>>], spec: &MStepSpec) -> Result<LogitModel> {
    spec.validate()?;
    check_posteriors(model, posteriors)?;
    if posteriors.iter().all(Option::is_none) {
        return Ok(model.clone());
    }
    match spec {
        MStepSpec::ClosedForm => closed_form(model, posteriors),
        MStepSpec::GradientAscent { steps, rate } => gradient_ascent(model, posteriors, *steps, *rate),
        MStepSpec::WeightedMle { steps, rate } => {
            let mut w = model.weights().to_vec();
            let mut cur = model.clone();
            for _ in 0..*steps {
                let g = surrogate_gradient(&cur, posteriors);
                w.iter_mut().zip(&g).for_each(|(w, g)| *w += rate * g);
                cur = model.with_weights(w.clone());
            }
            Ok(cur)
        }
    }
}

fn closed_form(model: &LogitModel, posteriors: &[Option<Vec<f64>>]) -> Result<LogitModel> {
    if !model.features().is_tabular() {
        return Err(Error::ClosedFormRequiresTabular(model.features().kind().label()));
    }
    let n = model.task().num_pairs();
    let mut w = model.weights().to_vec();
    for (x, q) in posteriors.iter().enumerate() {
        let Some(q) = q else { continue };
        // keep the old log-partition so a model refit to its own joint is unchanged
        let a = model.log_partition(x);
        for (p, &qp) in q.iter().enumerate() {
            w[x * n + p] = if qp > 0.0 { (qp.ln() + a).max(LOG_ZERO) } else { LOG_ZERO };
        }
    }
    Ok(model.with_weights(w))
}

fn gradient_ascent(
    model: &LogitModel,
    posteriors: &[Option<Vec<f64>>],
    steps: usize,
    rate: f64,
) -> Result<LogitModel> {
    let mut cur = model.clone();
    let mut s = surrogate(&cur, posteriors);
    for _ in 0..steps {
        let g = surrogate_gradient(&cur, posteriors);
        let gmax = math::max_abs(&g);
        if gmax == 0.0 {
            break;
        }
        let mut eta = rate;
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let w: Vec<f64> = cur.weights().iter().zip(&g).map(|(w, g)| w + eta * g).collect();
            let cand = cur.with_weights(w);
            let cs = surrogate(&cand, posteriors);
            if cs >= s {
                cur = cand;
                s = cs;
                moved = true;
                break;
            }
            eta *= 0.5;
        }
        if !moved {
            if gmax > 1e-8 {
                return Err(Error::SurrogateDecrease { halvings: MAX_HALVINGS });
            }
            break;
        }
    }
    Ok(cur)
}
