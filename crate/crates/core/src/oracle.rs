//! Brute-force reference computations. Each routine recomputes a quantity
//! from its definition with plain loops, without the log-space helpers,
//! caches or tree views the main code paths use.

use crate::error::Result;
use crate::model::LogitModel;
use crate::planner::ShapedMdp;
use crate::task::{enumerate_event, EventSpec};

/// `exp(θ·φ(x, p))` for every pair, scaled by `exp(−max)`, plus that max.
fn scaled_weights(model: &LogitModel, x: usize) -> (Vec<f64>, f64) {
    let task = model.task();
    let w = model.weights();
    let logits: Vec<f64> = (0..task.num_pairs())
        .map(|p| model.features().dense(x, p).iter().zip(w).map(|(f, w)| f * w).sum())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (logits.iter().map(|l| (l - max).exp()).collect(), max)
}

/// `P(z, y | x, θ)` from dense features.
pub fn joint(model: &LogitModel, x: usize) -> Vec<f64> {
    let (e, _) = scaled_weights(model, x);
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `log Σ_{(z, y, o) ∈ event} P(z, y | x) P(o | x, z, y)`.
pub fn event_logprob(model: &LogitModel, x: usize, event: &EventSpec) -> Result<f64> {
    let task = model.task();
    let p = joint(model, x);
    let mut mass = 0.0;
    for tr in enumerate_event(task, x, event)? {
        mass += p[task.pair_index(tr.latent, tr.response)] * task.obs_prob(x, tr.latent, tr.response, tr.obs);
    }
    Ok(mass.ln())
}

/// ρ-weighted objective.
pub fn objective(model: &LogitModel, event: &EventSpec) -> Result<f64> {
    let task = model.task();
    let mut acc = 0.0;
    for x in 0..task.num_prompts() {
        let w = task.prompt(x).weight;
        if w > 0.0 {
            acc += w * event_logprob(model, x, event)?;
        }
    }
    Ok(acc)
}

/// Posterior over pairs restricted to the event, or `None` for a zero-mass event.
pub fn posterior(model: &LogitModel, x: usize, event: &EventSpec) -> Result<Option<Vec<f64>>> {
    let task = model.task();
    let p = joint(model, x);
    let mut q = vec![0.0; task.num_pairs()];
    for tr in enumerate_event(task, x, event)? {
        let i = task.pair_index(tr.latent, tr.response);
        q[i] += p[i] * task.obs_prob(x, tr.latent, tr.response, tr.obs);
    }
    let s: f64 = q.iter().sum();
    Ok((s > 0.0).then(|| q.into_iter().map(|v| v / s).collect()))
}

/// `Σ p log(p / q)` skipping `p = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Softmax of leaf path returns `/ β`, walking parents leaf by leaf.
pub fn trajectory_softmax(mdp: &ShapedMdp) -> Vec<f64> {
    let tree = &mdp.tree;
    let totals: Vec<f64> = (0..tree.num_leaves())
        .map(|l| {
            let mut node = tree.leaf_of_pair(l);
            let mut r = 0.0;
            while let Some(parent) = tree.node(node).parent {
                r += mdp.reward[node];
                node = parent;
            }
            r / mdp.beta
        })
        .collect();
    let max = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = totals.iter().map(|t| (t - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Central finite differences of `f` at `w`, one coordinate at a time.
pub fn finite_difference(w: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut g = Vec::with_capacity(w.len());
    let mut probe = w.to_vec();
    for k in 0..w.len() {
        probe[k] = w[k] + h;
        let up = f(&probe)?;
        probe[k] = w[k] - h;
        let dn = f(&probe)?;
        probe[k] = w[k];
        g.push((up - dn) / (2.0 * h));
    }
    Ok(g)
}

/// `max_k |a_k − b_k| / max(1, |b_k|)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}
