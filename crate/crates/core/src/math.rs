//! Log-space probability arithmetic shared by every module.

/// Finite stand-in for `ln 0`. Anything at or below this is treated as an
/// impossible outcome; `exp` of it underflows to exactly zero.
pub const LOG_ZERO: f64 = -1.0e6;

/// `log Σ exp(x)` with max subtraction. Empty input or all `-inf` gives `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `log Σ exp(x)` over an iterator.
pub fn logsumexp_iter<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    logsumexp(&v)
}

/// Normalized log-probabilities `x - logsumexp(x)`.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|&x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

/// Half the L1 distance.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `KL(p || q)` with the `0 log 0 = 0` convention. Returns `+inf` when `p`
/// puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            acc += a * (a / b).ln();
        }
    }
    acc
}

/// KL computed from log-probabilities, robust when probabilities underflow.
pub fn kl_from_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    debug_assert_eq!(log_p.len(), log_q.len());
    let mut acc = 0.0;
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        let p = lp.exp();
        if p > 0.0 {
            acc += p * (lp - lq);
        }
    }
    acc
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum::<f64>()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without cancellation for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Safe natural log mapping zero to [`LOG_ZERO`].
pub fn ln_or_zero(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_ZERO)
    } else {
        LOG_ZERO
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}
