//! Softmax sequence models `P(z, y | x, θ) ∝ exp(⟨φ(x, z, y), θ⟩)`.
//!
//! A [`FeatureMap`] fixes `φ` over a task; a [`LogitModel`] pairs it with a
//! weight vector. The [`AutoregressiveView`] turns the joint into per-prefix
//! token conditionals on the task's prefix tree, which is what sampling and
//! the planner consume.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, logsumexp};
use crate::rng;
use crate::task::{GenerativeTask, PrefixTree, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// One-hot over `(x, z, y)`.
    Tabular,
    /// One-hot over `(x, z)` plus one-hot over `(x, y)`.
    Factored,
    /// Token-bigram counts of `z ++ y`, optionally separate per prompt.
    Bigram { per_prompt: bool },
    /// Dense hashed features in `[-1, 1)`, shared weights across prompts.
    Random { dim: usize, seed: u64 },
}

impl FeatureKind {
    pub fn label(&self) -> String {
        match self {
            FeatureKind::Tabular => "tabular".into(),
            FeatureKind::Factored => "factored".into(),
            FeatureKind::Bigram { per_prompt } => format!("bigram(per_prompt={per_prompt})"),
            FeatureKind::Random { dim, seed } => format!("random(dim={dim},seed={seed})"),
        }
    }
}

/// Sparse feature rows in compressed form.
#[derive(Debug)]
struct Csr {
    offsets: Vec<usize>,
    index: Vec<u32>,
    value: Vec<f64>,
}

impl Csr {
    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        self.index[a..b].iter().zip(&self.value[a..b]).map(|(&i, &v)| (i as usize, v))
    }
}

/// `φ` compiled against a task.
#[derive(Debug)]
pub struct FeatureMap {
    kind: FeatureKind,
    task: Arc<GenerativeTask>,
    dim: usize,
    /// Rows keyed by `x * N + pair` (random) or by `pair` (bigram).
    rows: Option<Csr>,
}

impl FeatureMap {
    pub fn new(task: Arc<GenerativeTask>, kind: FeatureKind) -> Result<Self> {
        let (p, n) = (task.num_prompts(), task.num_pairs());
        let (nz, ny) = (task.num_latents(), task.num_responses());
        let mut map = FeatureMap { kind: kind.clone(), task: task.clone(), dim: 0, rows: None };
        match kind {
            FeatureKind::Tabular => map.dim = p * n,
            FeatureKind::Factored => map.dim = p * (nz + ny),
            FeatureKind::Bigram { per_prompt } => {
                let v = task.vocab().size();
                let block = (v + 1) * v;
                let mut csr = Csr { offsets: vec![0], index: Vec::new(), value: Vec::new() };
                for pair in 0..n {
                    let (z, y) = task.split_pair(pair);
                    let mut counts = std::collections::BTreeMap::<usize, f64>::new();
                    let mut prev = v;
                    for &t in task.latents()[z].ids().iter().chain(task.responses()[y].ids()) {
                        *counts.entry(prev * v + t as usize).or_default() += 1.0;
                        prev = t as usize;
                    }
                    for (i, c) in counts {
                        csr.index.push(i as u32);
                        csr.value.push(c);
                    }
                    csr.offsets.push(csr.index.len());
                }
                map.dim = if per_prompt { p * block } else { block };
                map.rows = Some(csr);
            }
            FeatureKind::Random { dim, seed } => {
                if dim == 0 {
                    return Err(Error::InvalidConfig { field: "features.dim".into(), reason: "must be >= 1".into() });
                }
                let key = rng::StreamKey::root(seed).named("random-features");
                let mut csr = Csr {
                    offsets: Vec::with_capacity(p * n + 1),
                    index: Vec::with_capacity(p * n * dim),
                    value: Vec::with_capacity(p * n * dim),
                };
                csr.offsets.push(0);
                for x in 0..p {
                    let kx = key.child(x as u64);
                    for pair in 0..n {
                        let kp = kx.child(pair as u64);
                        for k in 0..dim {
                            csr.index.push(k as u32);
                            csr.value.push(rng::hashed_unit(kp.child(k as u64).value()));
                        }
                        csr.offsets.push(csr.index.len());
                    }
                }
                map.dim = dim;
                map.rows = Some(csr);
            }
        }
        Ok(map)
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    pub fn task(&self) -> &Arc<GenerativeTask> {
        &self.task
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_tabular(&self) -> bool {
        self.kind == FeatureKind::Tabular
    }

    /// Read-only view `(index, value)` of `φ(x, pair)`.
    pub fn for_each(&self, x: usize, pair: usize, mut f: impl FnMut(usize, f64)) {
        let t = &self.task;
        let n = t.num_pairs();
        match &self.kind {
            FeatureKind::Tabular => f(x * n + pair, 1.0),
            FeatureKind::Factored => {
                let (z, y) = t.split_pair(pair);
                let (nz, ny) = (t.num_latents(), t.num_responses());
                f(x * nz + z, 1.0);
                f(t.num_prompts() * nz + x * ny + y, 1.0);
            }
            FeatureKind::Bigram { per_prompt } => {
                let v = t.vocab().size();
                let off = if *per_prompt { x * (v + 1) * v } else { 0 };
                for (i, val) in self.rows.as_ref().unwrap().row(pair) {
                    f(off + i, val);
                }
            }
            FeatureKind::Random { .. } => {
                for (i, val) in self.rows.as_ref().unwrap().row(x * n + pair) {
                    f(i, val);
                }
            }
        }
    }

    /// Dense copy of `φ(x, pair)`.
    pub fn dense(&self, x: usize, pair: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.for_each(x, pair, |i, v| out[i] += v);
        out
    }

    pub fn check_compatible(&self, other: &FeatureMap) -> Result<()> {
        if self.kind != other.kind || self.dim != other.dim {
            return Err(Error::FeatureMismatch(format!("{} vs {}", self.kind.label(), other.kind.label())));
        }
        if !Arc::ptr_eq(&self.task, &other.task) && *self.task != *other.task {
            return Err(Error::FeatureMismatch(format!(
                "task {} vs {}",
                self.task.name(),
                other.task.name()
            )));
        }
        Ok(())
    }
}

/// Linear-logit softmax model over the pairs of a task.
#[derive(Clone, Debug)]
pub struct LogitModel {
    features: Arc<FeatureMap>,
    weights: Vec<f64>,
}

impl LogitModel {
    pub fn zeros(task: Arc<GenerativeTask>, kind: FeatureKind) -> Result<Self> {
        let features = Arc::new(FeatureMap::new(task, kind)?);
        let d = features.dim();
        Ok(LogitModel { features, weights: vec![0.0; d] })
    }

    /// Weights uniform in `[-scale, scale]` from a seeded stream.
    pub fn random(task: Arc<GenerativeTask>, kind: FeatureKind, scale: f64, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(task, kind)?;
        let mut r = rng::stream(seed, "model-init", &[]);
        if scale > 0.0 {
            m.weights.iter_mut().for_each(|w| *w = r.gen_range(-scale..=scale));
        }
        Ok(m)
    }

    pub fn from_parts(features: Arc<FeatureMap>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != features.dim() {
            return Err(Error::FeatureMismatch(format!(
                "weight length {} for feature dimension {}",
                weights.len(),
                features.dim()
            )));
        }
        Ok(LogitModel { features, weights })
    }

    /// Same features, new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.weights.len(), "weight length");
        LogitModel { features: self.features.clone(), weights }
    }

    pub fn features(&self) -> &Arc<FeatureMap> {
        &self.features
    }

    pub fn task(&self) -> &Arc<GenerativeTask> {
        self.features.task()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `f_θ(x, ·)` for every pair.
    pub fn logits(&self, x: usize) -> Vec<f64> {
        let n = self.task().num_pairs();
        if self.features.is_tabular() {
            return self.weights[x * n..(x + 1) * n].to_vec();
        }
        (0..n)
            .map(|p| {
                let mut s = 0.0;
                self.features.for_each(x, p, |i, v| s += self.weights[i] * v);
                s
            })
            .collect()
    }

    /// `A(x, θ) = log Σ exp f_θ(x, ·)`.
    pub fn log_partition(&self, x: usize) -> f64 {
        logsumexp(&self.logits(x))
    }

    /// `log P(·, · | x, θ)` for every pair.
    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        math::log_softmax(&self.logits(x))
    }

    pub fn probs(&self, x: usize) -> Vec<f64> {
        math::softmax(&self.logits(x))
    }

    pub fn joint_logprob(&self, x: usize, z: usize, y: usize) -> Result<f64> {
        let t = self.task();
        t.check_prompt(x)?;
        t.check_pair(z, y)?;
        let logits = self.logits(x);
        Ok(logits[t.pair_index(z, y)] - logsumexp(&logits))
    }

    /// `out += scale * Σ_p weights[p] φ(x, p)`.
    pub fn accumulate_features(&self, x: usize, weights: &[f64], scale: f64, out: &mut [f64]) {
        for (p, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                self.features.for_each(x, p, |i, v| out[i] += scale * w * v);
            }
        }
    }

    /// `∇A(x, θ) = E_P[φ]`.
    pub fn mean_features(&self, x: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.accumulate_features(x, &self.probs(x), 1.0, &mut out);
        out
    }

    /// Direct-sum `KL(P_a(·|x) ‖ P_b(·|x))`.
    pub fn kl_between(a: &LogitModel, b: &LogitModel, x: usize) -> Result<f64> {
        a.features.check_compatible(&b.features)?;
        Ok(math::kl_from_logs(&a.log_probs(x), &b.log_probs(x)).max(0.0))
    }

    /// The same KL via `A_b − A_a + ⟨E_{P_a} φ, θ_a − θ_b⟩`.
    pub fn kl_identity_form(a: &LogitModel, b: &LogitModel, x: usize) -> Result<f64> {
        a.features.check_compatible(&b.features)?;
        let diff: Vec<f64> = a.weights.iter().zip(&b.weights).map(|(u, v)| u - v).collect();
        Ok(b.log_partition(x) - a.log_partition(x) + math::dot(&a.mean_features(x), &diff))
    }

    /// ρ-weighted mean of per-prompt KL divergences.
    pub fn mean_kl(a: &LogitModel, b: &LogitModel) -> Result<f64> {
        let t = a.task();
        let mut acc = 0.0;
        for x in 0..t.num_prompts() {
            acc += t.prompt(x).weight * Self::kl_between(a, b, x)?;
        }
        Ok(acc)
    }

    pub fn conditional_tables(&self, x: usize) -> AutoregressiveView {
        AutoregressiveView::from_log_probs(self.task().prefix_tree(), &self.log_probs(x))
    }

    /// One exact draw from `P(·, · | x, θ)`; returns the pair index.
    pub fn sample(&self, x: usize, rng: &mut impl Rng) -> usize {
        self.conditional_tables(x).sample(rng)
    }

    /// Greedy token-by-token decode; returns the pair index.
    pub fn greedy(&self, x: usize) -> usize {
        self.conditional_tables(x).greedy()
    }

    /// Plain-text checkpoint: descriptor header and one weight per line.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        let t = self.task();
        writeln!(s, "features\t{}", serde_json::to_string(self.features.kind()).unwrap()).unwrap();
        writeln!(s, "task\t{}\t{}", t.name(), t.seed()).unwrap();
        writeln!(s, "dim\t{}", self.dim()).unwrap();
        for w in &self.weights {
            writeln!(s, "{w:.16e}").unwrap();
        }
        s
    }

    pub fn from_checkpoint(text: &str, task: Arc<GenerativeTask>) -> Result<Self> {
        let bad = |r: &str| Error::Parse(format!("checkpoint: {r}"));
        let mut lines = text.lines();
        let kind_line = lines.next().ok_or_else(|| bad("empty"))?;
        let kind_json = kind_line.strip_prefix("features\t").ok_or_else(|| bad("missing features"))?;
        let kind: FeatureKind = serde_json::from_str(kind_json).map_err(|e| bad(&e.to_string()))?;
        let task_line = lines.next().ok_or_else(|| bad("missing task"))?;
        let mut parts = task_line.split('\t');
        if parts.next() != Some("task") || parts.next() != Some(task.name()) {
            return Err(Error::MismatchedTask(format!("checkpoint is not for {}", task.name())));
        }
        let dim: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("dim\t"))
            .ok_or_else(|| bad("missing dim"))?
            .parse()
            .map_err(|_| bad("dim"))?;
        let weights = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad(l)))
            .collect::<Result<Vec<_>>>()?;
        if weights.len() != dim {
            return Err(bad("weight count"));
        }
        let features = Arc::new(FeatureMap::new(task, kind)?);
        Self::from_parts(features, weights)
    }
}

/// Per-prefix token conditionals `π(a_h | x, a_{1:h-1})` over the prefix tree.
#[derive(Clone, Debug)]
pub struct AutoregressiveView {
    tree: Arc<PrefixTree>,
    /// Log of the total probability of all completions below each node.
    log_mass: Vec<f64>,
}

impl AutoregressiveView {
    pub fn from_log_probs(tree: Arc<PrefixTree>, log_probs: &[f64]) -> Self {
        let log_mass = subtree_log_mass(&tree, log_probs);
        AutoregressiveView { tree, log_mass }
    }

    pub fn tree(&self) -> &Arc<PrefixTree> {
        &self.tree
    }

    pub fn log_mass(&self) -> &[f64] {
        &self.log_mass
    }

    /// `log π(token of child | prefix of parent)`.
    pub fn log_cond(&self, child: usize) -> f64 {
        let parent = self.tree.node(child).parent.expect("root has no conditional");
        self.log_mass[child] - self.log_mass[parent]
    }

    /// Token distribution at a node.
    pub fn distribution(&self, node: usize) -> Vec<(TokenId, f64)> {
        self.tree
            .node(node)
            .children
            .iter()
            .map(|&c| (self.tree.node(c).token, self.log_cond(c).exp()))
            .collect()
    }

    /// Sum of log conditionals along the path to a pair's leaf.
    pub fn sequence_logprob(&self, pair: usize) -> f64 {
        let mut node = self.tree.leaf_of_pair(pair);
        let mut acc = 0.0;
        while self.tree.node(node).parent.is_some() {
            acc += self.log_cond(node);
            node = self.tree.node(node).parent.unwrap();
        }
        acc
    }

    /// Inverse-CDF walk from the root; children are visited in token order.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let mut node = 0;
        loop {
            let n = self.tree.node(node);
            if let Some(p) = n.leaf {
                return p;
            }
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = *n.children.last().unwrap();
            for &c in &n.children {
                acc += self.log_cond(c).exp();
                if u < acc {
                    pick = c;
                    break;
                }
            }
            node = pick;
        }
    }

    /// Most likely token at each step; ties go to the lowest token id.
    pub fn greedy(&self) -> usize {
        let mut node = 0;
        loop {
            let n = self.tree.node(node);
            if let Some(p) = n.leaf {
                return p;
            }
            let mut best = n.children[0];
            for &c in &n.children[1..] {
                if self.log_mass[c] > self.log_mass[best] {
                    best = c;
                }
            }
            node = best;
        }
    }
}

/// `log Σ` of leaf log-probabilities in each subtree, children before parents.
pub fn subtree_log_mass(tree: &PrefixTree, leaf_log_probs: &[f64]) -> Vec<f64> {
    let mut mass = vec![f64::NEG_INFINITY; tree.len()];
    let mut buf = Vec::new();
    for id in (0..tree.len()).rev() {
        let node = tree.node(id);
        mass[id] = match node.leaf {
            Some(p) => leaf_log_probs[p],
            None => {
                buf.clear();
                buf.extend(node.children.iter().map(|&c| mass[c]));
                logsumexp(&buf)
            }
        };
    }
    mass
}
