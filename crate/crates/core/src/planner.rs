//! Entropy-regularized planning on deterministic prefix-tree MDPs.
//!
//! States are token prefixes, actions append one token, and a trajectory ends
//! at a leaf. With `β`-regularization the optimal values satisfy
//! `Q(s, a) = r(s, a) + V(s·a)` and `V(s) = β log Σ_a exp(Q(s, a) / β)`, and the
//! optimal policy is `π(a | s) = exp((Q(s, a) − V(s)) / β)`.
//!
//! [`shape_rewards`] builds the MDP whose `β = 1` optimal trajectory
//! distribution is the event posterior of a reference model.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{self, logsumexp, LOG_ZERO};
use crate::model::LogitModel;
use crate::task::{EventSpec, PrefixTree, TokenId};

/// Deterministic MDP over a prefix tree. `reward[n]` is the reward of the
/// action that leads from `n`'s parent into `n`.
#[derive(Clone, Debug)]
pub struct ShapedMdp {
    pub tree: Arc<PrefixTree>,
    pub reward: Vec<f64>,
    pub beta: f64,
    pub horizon: usize,
    /// Leaves whose terminal reward was clamped to [`LOG_ZERO`].
    pub clamped: Vec<bool>,
}

impl ShapedMdp {
    pub fn new(tree: Arc<PrefixTree>, reward: Vec<f64>, beta: f64, horizon: usize) -> Result<Self> {
        let clamped = vec![false; tree.num_leaves()];
        let mdp = ShapedMdp { tree, reward, beta, horizon, clamped };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig { field: "beta".into(), reason: format!("{} is not positive", self.beta) });
        }
        if self.reward.len() != self.tree.len() {
            return Err(Error::InvalidConfig { field: "reward".into(), reason: "one reward per tree node".into() });
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidConfig { field: "reward".into(), reason: "rewards must be finite".into() });
        }
        let depth = self.tree.max_depth();
        if depth > self.horizon {
            return Err(Error::HorizonViolation(format!("trajectory of length {depth} exceeds horizon {}", self.horizon)));
        }
        if let Some(n) = self.tree.nodes().iter().position(|n| n.leaf.is_none() && n.children.is_empty()) {
            return Err(Error::HorizonViolation(format!("state {n} has no way to terminate")));
        }
        Ok(())
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut m = self.clone();
        m.beta = beta;
        m.validate()?;
        Ok(m)
    }

    /// Sum of rewards along the root-to-leaf path of every leaf.
    pub fn total_rewards(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.tree.len()];
        for id in 1..self.tree.len() {
            acc[id] = acc[self.tree.node(id).parent.unwrap()] + self.reward[id];
        }
        (0..self.tree.num_leaves()).map(|l| acc[self.tree.leaf_of_pair(l)]).collect()
    }

    /// Random tree MDP with at most `max_actions` tokens per state and paths
    /// of at most `horizon` actions; token 0 terminates.
    pub fn random(horizon: usize, max_actions: usize, beta: f64, rng: &mut impl Rng) -> Result<Self> {
        assert!(horizon >= 1 && max_actions >= 1);
        let mut seqs: Vec<Vec<TokenId>> = Vec::new();
        let mut stack: Vec<Vec<TokenId>> = vec![Vec::new()];
        while let Some(prefix) = stack.pop() {
            if prefix.len() + 1 == horizon {
                let mut s = prefix;
                s.push(0);
                seqs.push(s);
                continue;
            }
            let mut any = false;
            if rng.gen_bool(0.3) {
                let mut s = prefix.clone();
                s.push(0);
                seqs.push(s);
                any = true;
            }
            for a in 1..max_actions as TokenId {
                if rng.gen_bool(0.5) {
                    let mut s = prefix.clone();
                    s.push(a);
                    stack.push(s);
                    any = true;
                }
            }
            if !any {
                let mut s = prefix;
                s.push(0);
                seqs.push(s);
            }
        }
        seqs.sort();
        let tree = Arc::new(PrefixTree::from_sequences(seqs, 0));
        let reward = (0..tree.len())
            .map(|i| if i == 0 { 0.0 } else { rng.gen_range(-2.0..2.0) })
            .collect();
        ShapedMdp::new(tree, reward, beta, horizon)
    }
}

/// Soft-optimal values and policy. Indexed by node: `q[n]` and `log_policy[n]`
/// refer to the action entering `n`, `v[n]` to the state `n`.
#[derive(Clone, Debug)]
pub struct SoftPlan {
    pub tree: Arc<PrefixTree>,
    pub beta: f64,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub log_policy: Vec<f64>,
}

impl SoftPlan {
    pub fn policy(&self, child: usize) -> f64 {
        self.log_policy[child].exp()
    }

    /// Value of the start state.
    pub fn root_value(&self) -> f64 {
        self.v[0]
    }

    /// Rows `(prefix, action, q, v, policy)` for inspection.
    pub fn to_rows(&self) -> Vec<String> {
        (1..self.tree.len())
            .map(|n| {
                let parent = self.tree.node(n).parent.unwrap();
                let prefix: Vec<String> = self.tree.path(parent).iter().map(|t| t.to_string()).collect();
                format!(
                    "{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}",
                    prefix.join(" "),
                    self.tree.node(n).token,
                    self.q[n],
                    self.v[parent],
                    self.policy(n)
                )
            })
            .collect()
    }

    /// Shannon entropy of the policy at each internal state.
    pub fn state_entropies(&self) -> Vec<(usize, f64)> {
        self.tree
            .nodes()
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.children.is_empty())
            .map(|(i, n)| {
                let p: Vec<f64> = n.children.iter().map(|&c| self.policy(c)).collect();
                (i, math::entropy(&p))
            })
            .collect()
    }
}

/// Exact backward induction, leaves first.
pub fn soft_value_iteration(mdp: &ShapedMdp) -> Result<SoftPlan> {
    mdp.validate()?;
    let tree = &mdp.tree;
    let beta = mdp.beta;
    let n = tree.len();
    let mut v = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut buf = Vec::new();
    for id in (0..n).rev() {
        let node = tree.node(id);
        if !node.children.is_empty() {
            buf.clear();
            buf.extend(node.children.iter().map(|&c| q[c] / beta));
            v[id] = beta * logsumexp(&buf);
        }
        if id > 0 {
            q[id] = mdp.reward[id] + v[id];
        }
    }
    let mut log_policy = vec![0.0; n];
    for id in 1..n {
        let parent = tree.node(id).parent.unwrap();
        log_policy[id] = (q[id] - v[parent]) / beta;
    }
    Ok(SoftPlan { tree: tree.clone(), beta, q, v, log_policy })
}

/// Largest `|Q(s, a) − r(s, a) − V(s·a)|` and `|V(s) − β log Σ exp(Q / β)|`.
pub fn bellman_residual(mdp: &ShapedMdp, plan: &SoftPlan) -> f64 {
    let mut worst: f64 = 0.0;
    for id in 0..mdp.tree.len() {
        let node = mdp.tree.node(id);
        if id > 0 {
            worst = worst.max((plan.q[id] - mdp.reward[id] - plan.v[id]).abs());
        }
        if !node.children.is_empty() {
            let qs: Vec<f64> = node.children.iter().map(|&c| plan.q[c] / plan.beta).collect();
            worst = worst.max((plan.v[id] - plan.beta * logsumexp(&qs)).abs());
        }
    }
    worst
}

/// Distribution over the leaves below `from`, as `(leaf index, probability)`
/// in leaf order, obtained by multiplying policy probabilities along paths.
pub fn trajectory_distribution(plan: &SoftPlan, from: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(from, 0.0f64)];
    while let Some((id, lp)) = stack.pop() {
        let node = plan.tree.node(id);
        if let Some(l) = node.leaf {
            out.push((l, lp.exp()));
        }
        for &c in node.children.iter().rev() {
            stack.push((c, lp + plan.log_policy[c]));
        }
    }
    out.sort_by_key(|&(l, _)| l);
    out
}

/// Dense leaf distribution from the start state.
pub fn leaf_distribution(plan: &SoftPlan) -> Vec<f64> {
    let mut lp = vec![0.0; plan.tree.len()];
    for id in 1..plan.tree.len() {
        lp[id] = lp[plan.tree.node(id).parent.unwrap()] + plan.log_policy[id];
    }
    (0..plan.tree.num_leaves()).map(|l| lp[plan.tree.leaf_of_pair(l)].exp()).collect()
}

/// Exact `E_π[Σ_h r(s_h, a_h) − β log π(a_h | s_h)]` from the start state for
/// any policy given as per-node log-probabilities.
pub fn regularized_return(mdp: &ShapedMdp, log_policy: &[f64]) -> f64 {
    let tree = &mdp.tree;
    let mut j = vec![0.0; tree.len()];
    for id in (0..tree.len()).rev() {
        let node = tree.node(id);
        j[id] = node
            .children
            .iter()
            .map(|&c| {
                let p = log_policy[c].exp();
                if p > 0.0 {
                    p * (mdp.reward[c] - mdp.beta * log_policy[c] + j[c])
                } else {
                    0.0
                }
            })
            .sum();
    }
    j[0]
}

/// Deliberate corruption of the shaped rewards, used to check that the
/// verification suite notices a broken shaping step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShapingFault {
    #[default]
    None,
    FlipTokenSign,
}

/// Token rewards `log π_θ(a_j | a_{<j}, x)` plus the terminal reward
/// `log P(o ∈ Ô | x, z, y)` on event pairs and [`LOG_ZERO`] elsewhere, at `β = 1`.
pub fn shape_rewards(reference: &LogitModel, x: usize, event: &EventSpec) -> Result<ShapedMdp> {
    shape_rewards_with(reference, x, event, ShapingFault::None)
}

pub fn shape_rewards_with(
    reference: &LogitModel,
    x: usize,
    event: &EventSpec,
    fault: ShapingFault,
) -> Result<ShapedMdp> {
    let task = reference.task();
    let mask = task.event_mask(x, event)?;
    let view = reference.conditional_tables(x);
    let tree = view.tree().clone();
    let sign = if fault == ShapingFault::FlipTokenSign { -1.0 } else { 1.0 };
    let mut reward = vec![0.0; tree.len()];
    for (id, r) in reward.iter_mut().enumerate().skip(1) {
        *r = sign * view.log_cond(id);
    }
    let mut clamped = vec![false; tree.num_leaves()];
    for pair in 0..task.num_pairs() {
        let (z, y) = task.split_pair(pair);
        let mut term = if mask.contains_pair(z, y) { task.log_obs_mass(x, z, y, &mask.obs) } else { f64::NEG_INFINITY };
        if term <= LOG_ZERO {
            term = LOG_ZERO;
            clamped[pair] = true;
        }
        reward[tree.leaf_of_pair(pair)] += term;
    }
    if clamped.iter().all(|&c| c) {
        return Err(Error::UnreachableEvent { prompt: x });
    }
    let mut mdp = ShapedMdp::new(tree, reward, 1.0, task.horizon())?;
    mdp.clamped = clamped;
    Ok(mdp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::JointModel;
    use crate::model::FeatureKind;
    use crate::rng;
    use crate::task::{random_task, EvaluatorSpec, GenerativeTask, TaskKind, TaskSpec, VerifierScope};
    use proptest::prelude::*;
    use rand::Rng;

    fn two_leaf(rewards: [f64; 2], beta: f64) -> ShapedMdp {
        let tree = Arc::new(PrefixTree::from_sequences(vec![vec![1], vec![2]], 0));
        ShapedMdp::new(tree, vec![0.0, rewards[0], rewards[1]], beta, 1).unwrap()
    }

    #[test]
    fn single_step_closed_form() {
        let plan = soft_value_iteration(&two_leaf([0.0, 3f64.ln()], 1.0)).unwrap();
        assert!((plan.root_value() - 4f64.ln()).abs() < 1e-15);
        assert!((plan.policy(1) - 0.25).abs() < 1e-15);
        assert!((plan.policy(2) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn two_suffix_proportionality() {
        let plan = soft_value_iteration(&two_leaf([0.0, 2f64.ln()], 1.0)).unwrap();
        let d = trajectory_distribution(&plan, 0);
        assert!((d[0].1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[1].1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_reward_gives_uniform_policy() {
        let mut seqs = Vec::new();
        for a in 1..4 {
            for b in 1..4 {
                seqs.push(vec![a, b, 0]);
            }
        }
        let tree = Arc::new(PrefixTree::from_sequences(seqs, 0));
        for beta in [0.3, 1.0, 3.0] {
            let mdp = ShapedMdp::new(tree.clone(), vec![0.0; tree.len()], beta, 3).unwrap();
            let plan = soft_value_iteration(&mdp).unwrap();
            for n in tree.nodes() {
                for &c in &n.children {
                    assert!((plan.policy(c) - 1.0 / n.children.len() as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn horizon_violation_is_reported() {
        let tree = Arc::new(PrefixTree::from_sequences(vec![vec![1, 1, 0]], 0));
        let err = ShapedMdp::new(tree, vec![0.0; 4], 1.0, 2).unwrap_err();
        assert!(matches!(err, Error::HorizonViolation(_)));
    }

    fn carry(d: usize, b: usize) -> Arc<GenerativeTask> {
        Arc::new(
            TaskSpec::new(TaskKind::CarryAddition { digits: d, base: b }, 0, EvaluatorSpec::default())
                .build()
                .unwrap(),
        )
    }

    #[test]
    fn shaped_total_reward_telescopes() {
        let t = carry(1, 3);
        let m = LogitModel::random(t.clone(), FeatureKind::Bigram { per_prompt: true }, 1.0, 2).unwrap();
        let ev = EventSpec::accepted();
        let mdp = shape_rewards(&m, 4, &ev).unwrap();
        let totals = mdp.total_rewards();
        let mask = t.event_mask(4, &ev).unwrap();
        for (p, total) in totals.iter().enumerate() {
            let (z, y) = t.split_pair(p);
            let term = t.log_obs_mass(4, z, y, &mask.obs).max(LOG_ZERO);
            let expect = m.joint_logprob(4, z, y).unwrap() + term;
            assert!((total - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn uniform_reference_gives_uniform_over_verified() {
        let t = Arc::new(random_task(1, 5, 4, 2, EvaluatorSpec::RandomHard { accept_prob: 0.4 }).unwrap());
        let m = LogitModel::zeros(t.clone(), FeatureKind::Tabular).unwrap();
        let plan = soft_value_iteration(&shape_rewards(&m, 0, &EventSpec::accepted()).unwrap()).unwrap();
        let d = leaf_distribution(&plan);
        let verified: Vec<usize> = (0..t.num_pairs())
            .filter(|&p| {
                let (z, y) = t.split_pair(p);
                t.obs_prob(0, z, y, 1) == 1.0
            })
            .collect();
        for (p, q) in d.iter().enumerate() {
            let expect = if verified.contains(&p) { 1.0 / verified.len() as f64 } else { 0.0 };
            assert!((q - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn planning_matches_exact_posterior() {
        let t = carry(1, 3);
        let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 2.0, 9).unwrap();
        for x in 0..t.num_prompts() {
            let plan = soft_value_iteration(&shape_rewards(&m, x, &EventSpec::accepted()).unwrap()).unwrap();
            let post = JointModel::new(&m).exact_posterior(x, &EventSpec::accepted()).unwrap().pair_marginal(&t);
            assert!(math::total_variation(&leaf_distribution(&plan), &post) <= 1e-8);
            assert!((plan.root_value() - JointModel::new(&m).event_logprob(x, &EventSpec::accepted()).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn unreachable_event_is_an_error() {
        let t = Arc::new(random_task(1, 2, 2, 0, EvaluatorSpec::Verifier { scope: VerifierScope::AnswerAndTrace }).unwrap());
        let m = LogitModel::zeros(t, FeatureKind::Tabular).unwrap();
        let ev = EventSpec { latent: crate::task::Subset::NotGold, response: crate::task::Subset::All, obs: crate::task::Subset::Gold };
        assert!(matches!(shape_rewards(&m, 0, &ev), Err(Error::UnreachableEvent { .. })));
    }

    #[test]
    fn flipped_sign_breaks_equivalence() {
        let t = carry(1, 3);
        let m = LogitModel::random(t.clone(), FeatureKind::Tabular, 2.0, 9).unwrap();
        let mdp = shape_rewards_with(&m, 0, &EventSpec::full(), ShapingFault::FlipTokenSign).unwrap();
        let plan = soft_value_iteration(&mdp).unwrap();
        let post = JointModel::new(&m).exact_posterior(0, &EventSpec::full()).unwrap().pair_marginal(&t);
        assert!(math::total_variation(&leaf_distribution(&plan), &post) > 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(60))]

        #[test]
        fn plan_matches_softmax_of_total_rewards(
            seed in any::<u64>(), h in 1usize..=5, a in 1usize..=6, bi in 0usize..3,
        ) {
            let beta = [0.3, 1.0, 3.0][bi];
            let mut r = rng::stream(seed, "mdp", &[]);
            let mdp = ShapedMdp::random(h, a, beta, &mut r).unwrap();
            let plan = soft_value_iteration(&mdp).unwrap();
            prop_assert!(bellman_residual(&mdp, &plan) <= 1e-10);
            let totals: Vec<f64> = mdp.total_rewards().iter().map(|v| v / beta).collect();
            let softmax = math::softmax(&totals);
            let dist: Vec<f64> = trajectory_distribution(&plan, 0).into_iter().map(|(_, p)| p).collect();
            prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(math::total_variation(&dist, &softmax) <= 1e-9);
            prop_assert!((plan.root_value() - beta * logsumexp(&totals)).abs() <= 1e-9);
            prop_assert!((regularized_return(&mdp, &plan.log_policy) - plan.root_value()).abs() <= 1e-9);
            for _ in 0..100 {
                let mut lp = vec![0.0; mdp.tree.len()];
                for n in mdp.tree.nodes() {
                    let raw: Vec<f64> = n.children.iter().map(|_| r.gen_range(-3.0..3.0)).collect();
                    for (&c, l) in n.children.iter().zip(math::log_softmax(&raw)) {
                        lp[c] = l;
                    }
                }
                prop_assert!(regularized_return(&mdp, &lp) <= plan.root_value() + 1e-9);
            }
        }

        #[test]
        fn last_step_entropy_grows_with_beta(seed in any::<u64>()) {
            let mut r = rng::stream(seed, "mdp-beta", &[]);
            let mdp = ShapedMdp::random(4, 4, 1.0, &mut r).unwrap();
            let tree = mdp.tree.clone();
            let ent = |b: f64| soft_value_iteration(&mdp.with_beta(b).unwrap()).unwrap().state_entropies();
            let (e1, e2, e3) = (ent(0.1), ent(1.0), ent(10.0));
            for i in 0..e1.len() {
                let state = tree.node(e1[i].0);
                if state.children.iter().all(|&c| tree.node(c).leaf.is_some()) {
                    prop_assert!(e1[i].1 <= e2[i].1 + 1e-12);
                    prop_assert!(e2[i].1 <= e3[i].1 + 1e-12);
                }
            }
        }
    }
}
