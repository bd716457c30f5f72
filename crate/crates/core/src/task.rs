//! Finite synthetic reasoning tasks.
//!
//! A task fixes a prompt distribution, a latent-rationale space `Z`, a
//! response space `Y`, an observation space `O` and an evaluator
//! `P(o | x, z, y)` that does not depend on the model. Everything is small
//! enough to enumerate: `|Z x Y|` is checked against a cap at construction.
//!
//! Latents and responses are token sequences ending in `eos`, stored in
//! lexicographic order. A joint outcome `(z, y)` is addressed by its *pair
//! index* `z * |Y| + y`, which is also the lexicographic order of the
//! concatenated sequence `z ++ y`.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = u32;

/// Default bound on `|Z x Y|`.
pub const DEFAULT_CAP: u64 = 1_000_000;

/// Observation id meaning "accepted" in binary observation spaces.
pub const OBS_ACCEPT: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
    eos: TokenId,
}

impl Vocabulary {
    pub fn new(names: Vec<String>, eos: TokenId) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidTask("vocabulary needs at least two symbols".into()));
        }
        if eos as usize >= names.len() {
            return Err(Error::InvalidTask(format!("eos id {eos} outside vocabulary")));
        }
        Ok(Vocabulary { names, eos })
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn name(&self, id: TokenId) -> &str {
        &self.names[id as usize]
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.names.len()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&t| self.name(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// An `eos`-terminated token sequence with no token after the first `eos`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, vocab: &Vocabulary, horizon: usize) -> Result<Self> {
        if ids.is_empty() || ids.len() > horizon {
            return Err(Error::InvalidTask(format!(
                "sequence length {} outside 1..={horizon}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| !vocab.contains(t)) {
            return Err(Error::InvalidTask(format!("token {bad} outside vocabulary")));
        }
        let eos = vocab.eos();
        if *ids.last().unwrap() != eos || ids[..ids.len() - 1].contains(&eos) {
            return Err(Error::InvalidTask(format!(
                "sequence {ids:?} must end with its only eos"
            )));
        }
        Ok(TokenSequence(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The sequence padded with `eos` up to `horizon`.
    pub fn padded(&self, eos: TokenId, horizon: usize) -> Vec<TokenId> {
        let mut v = self.0.clone();
        v.resize(horizon.max(v.len()), eos);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    pub weight: f64,
    pub gold_latent: usize,
    pub gold_response: usize,
}

/// Which parts of `(z, y)` a binary verifier checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierScope {
    /// Only the final answer.
    Answer,
    /// The answer and the rationale trace.
    AnswerAndTrace,
}

/// Shape of a nonpositive reward `R(x, z, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum RewardShape {
    /// `-penalty` per token position differing from the gold latent and response.
    Mismatch { penalty: f64 },
    /// `0` when verified under `scope`, `-penalty` otherwise.
    Verified { scope: VerifierScope, penalty: f64 },
    /// Explicit rewards laid out `[prompt][pair]`.
    Table { rewards: Vec<f64> },
}

/// The observation model `P(o | x, z, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evaluator {
    /// `P(o = 1) = 1{verified}` over `O = {0, 1}`.
    BinaryVerifier { scope: VerifierScope },
    /// `P(o = 1) = exp(R / beta)` with `R <= 0` over `O = {0, 1}`.
    SoftReward { beta: f64, shape: RewardShape },
    /// Arbitrary distributions laid out `[prompt][pair][obs]`.
    Table { obs_size: usize, probs: Vec<f64> },
}

impl Evaluator {
    pub fn obs_size(&self) -> usize {
        match self {
            Evaluator::Table { obs_size, .. } => *obs_size,
            _ => 2,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Evaluator::BinaryVerifier { .. } => "binary_verifier",
            Evaluator::SoftReward { .. } => "soft_reward",
            Evaluator::Table { .. } => "table",
        }
    }
}

/// A subset of one of the task spaces. `Gold` refers to the prompt's gold
/// latent or response; for observations it is the accept signal `o = 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Gold,
    NotGold,
    Indices(Vec<usize>),
    Intersect(Vec<Subset>),
}

impl Subset {
    pub fn contains(&self, gold: usize, idx: usize) -> bool {
        match self {
            Subset::All => true,
            Subset::Gold => idx == gold,
            Subset::NotGold => idx != gold,
            Subset::Indices(v) => v.contains(&idx),
            Subset::Intersect(parts) => parts.iter().all(|s| s.contains(gold, idx)),
        }
    }

    fn materialize(&self, gold: usize, size: usize) -> Vec<usize> {
        (0..size).filter(|&i| self.contains(gold, i)).collect()
    }
}

/// Target event `Ẑ x Ŷ x Ô`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpec {
    pub latent: Subset,
    pub response: Subset,
    pub obs: Subset,
}

impl EventSpec {
    pub fn full() -> Self {
        EventSpec { latent: Subset::All, response: Subset::All, obs: Subset::All }
    }

    /// Every `(z, y)` with the accept observation.
    pub fn accepted() -> Self {
        EventSpec { latent: Subset::All, response: Subset::All, obs: Subset::Gold }
    }

    /// Gold response with the accept observation; the latent is free.
    pub fn gold_answer() -> Self {
        EventSpec { latent: Subset::All, response: Subset::Gold, obs: Subset::Gold }
    }
}

/// One `(z, y, o)` element of an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub latent: usize,
    pub response: usize,
    pub obs: usize,
}

/// Materialized event for one prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventMask {
    pub latents: Vec<usize>,
    pub responses: Vec<usize>,
    pub obs: Vec<usize>,
}

impl EventMask {
    pub fn contains_pair(&self, z: usize, y: usize) -> bool {
        self.latents.binary_search(&z).is_ok() && self.responses.binary_search(&y).is_ok()
    }

    pub fn len(&self) -> usize {
        self.latents.len() * self.responses.len() * self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Node of the prefix tree over concatenated `z ++ y` sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub token: TokenId,
    pub depth: usize,
    pub children: Vec<usize>,
    /// Pair index when this node completes a `(z, y)` sequence.
    pub leaf: Option<usize>,
}

/// Trie of all valid joint sequences. Node ids increase from parent to child,
/// so a reverse scan visits children before parents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixTree {
    nodes: Vec<TreeNode>,
    leaf_of_pair: Vec<usize>,
}

impl PrefixTree {
    fn build(task: &GenerativeTask) -> Self {
        let seqs = (0..task.num_latents()).flat_map(|z| {
            (0..task.num_responses()).map(move |y| {
                task.latents[z].ids().iter().chain(task.responses[y].ids()).copied().collect::<Vec<_>>()
            })
        });
        Self::from_sequences(seqs, task.vocab.eos())
    }

    /// Trie over prefix-free sequences; leaf `i` is the `i`-th sequence.
    /// The root carries `root_token`, which is never emitted.
    pub fn from_sequences(seqs: impl IntoIterator<Item = Vec<TokenId>>, root_token: TokenId) -> Self {
        let mut nodes = vec![TreeNode {
            parent: None,
            token: root_token,
            depth: 0,
            children: Vec::new(),
            leaf: None,
        }];
        let mut leaf_of_pair = Vec::new();
        for (i, seq) in seqs.into_iter().enumerate() {
            let mut cur = 0usize;
            for tok in seq {
                let found = nodes[cur].children.iter().copied().find(|&c| nodes[c].token == tok);
                cur = match found {
                    Some(c) => c,
                    None => {
                        let id = nodes.len();
                        let depth = nodes[cur].depth + 1;
                        nodes.push(TreeNode { parent: Some(cur), token: tok, depth, children: Vec::new(), leaf: None });
                        nodes[cur].children.push(id);
                        id
                    }
                };
            }
            assert!(nodes[cur].leaf.is_none() && nodes[cur].children.is_empty(), "sequences must be prefix-free");
            nodes[cur].leaf = Some(i);
            leaf_of_pair.push(cur);
        }
        let tokens: Vec<TokenId> = nodes.iter().map(|n| n.token).collect();
        for n in &mut nodes {
            n.children.sort_by_key(|&c| tokens[c]);
        }
        PrefixTree { nodes, leaf_of_pair }
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_of_pair.len()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_of_pair(&self, pair: usize) -> usize {
        self.leaf_of_pair[pair]
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Token path from the root to `node`.
    pub fn path(&self, mut node: usize) -> Vec<TokenId> {
        let mut out = Vec::new();
        while let Some(p) = self.nodes[node].parent {
            out.push(self.nodes[node].token);
            node = p;
        }
        out.reverse();
        out
    }
}

/// Generator families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    CarryAddition { digits: usize, base: usize },
    AutomatonTrace { num_states: usize, input_len: usize },
    Random {
        prompts: usize,
        latents: usize,
        responses: usize,
        alphabet: usize,
        max_len: usize,
    },
    /// Latent space replaced by reward tags `[tag, eos]`; the top tag is gold.
    Tagged { inner: Box<TaskKind>, num_tags: usize },
}

/// Evaluator recipe; materialized against a constructed task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorSpec {
    Verifier { scope: VerifierScope },
    SoftMismatch { beta: f64, penalty: f64 },
    SoftVerified { beta: f64, scope: VerifierScope, penalty: f64 },
    /// Each `(x, z, y)` accepted independently with probability `accept_prob`,
    /// and the gold pair always accepted.
    RandomHard { accept_prob: f64 },
    /// Rewards uniform in `[-scale, 0]`, gold pair at 0.
    RandomSoft { beta: f64, scale: f64 },
    /// Dirichlet-like random observation distributions.
    RandomTable { obs_size: usize },
}

impl Default for EvaluatorSpec {
    fn default() -> Self {
        EvaluatorSpec::Verifier { scope: VerifierScope::AnswerAndTrace }
    }
}

/// Everything needed to rebuild a task deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub generator: TaskKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub evaluator: EvaluatorSpec,
    #[serde(default = "default_cap")]
    pub cap: u64,
}

fn default_cap() -> u64 {
    DEFAULT_CAP
}

impl TaskSpec {
    pub fn new(generator: TaskKind, seed: u64, evaluator: EvaluatorSpec) -> Self {
        TaskSpec { generator, seed, evaluator, cap: DEFAULT_CAP }
    }

    pub fn with_cap(mut self, cap: u64) -> Self {
        self.cap = cap;
        self
    }

    pub fn build(&self) -> Result<GenerativeTask> {
        let raw = build_raw(&self.generator, self.seed, self.cap)?;
        let mut erng = rng::stream(self.seed, "task-evaluator", &[]);
        let evaluator = materialize_evaluator(&self.evaluator, &raw, &mut erng)?;
        let task = GenerativeTask {
            name: raw.name,
            spec: self.clone(),
            vocab: raw.vocab,
            horizon: raw.horizon,
            prompts: raw.prompts,
            latents: raw.latents,
            responses: raw.responses,
            evaluator,
            tree: OnceLock::new(),
        };
        task.validate()?;
        Ok(task)
    }
}

/// Immutable finite task. Cheap to share across threads.
#[derive(Debug, Serialize, Deserialize)]
pub struct GenerativeTask {
    name: String,
    spec: TaskSpec,
    vocab: Vocabulary,
    horizon: usize,
    prompts: Vec<Prompt>,
    latents: Vec<TokenSequence>,
    responses: Vec<TokenSequence>,
    evaluator: Evaluator,
    #[serde(skip)]
    tree: OnceLock<Arc<PrefixTree>>,
}

impl Clone for GenerativeTask {
    fn clone(&self) -> Self {
        GenerativeTask {
            name: self.name.clone(),
            spec: self.spec.clone(),
            vocab: self.vocab.clone(),
            horizon: self.horizon,
            prompts: self.prompts.clone(),
            latents: self.latents.clone(),
            responses: self.responses.clone(),
            evaluator: self.evaluator.clone(),
            tree: self.tree.clone(),
        }
    }
}

impl PartialEq for GenerativeTask {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.spec == other.spec
            && self.vocab == other.vocab
            && self.horizon == other.horizon
            && self.prompts == other.prompts
            && self.latents == other.latents
            && self.responses == other.responses
            && self.evaluator == other.evaluator
    }
}

impl GenerativeTask {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.spec.seed
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn prompt(&self, x: usize) -> &Prompt {
        &self.prompts[x]
    }

    pub fn latents(&self) -> &[TokenSequence] {
        &self.latents
    }

    pub fn responses(&self) -> &[TokenSequence] {
        &self.responses
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn num_latents(&self) -> usize {
        self.latents.len()
    }

    pub fn num_responses(&self) -> usize {
        self.responses.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.latents.len() * self.responses.len()
    }

    pub fn obs_size(&self) -> usize {
        self.evaluator.obs_size()
    }

    pub fn pair_index(&self, z: usize, y: usize) -> usize {
        z * self.responses.len() + y
    }

    pub fn split_pair(&self, pair: usize) -> (usize, usize) {
        (pair / self.responses.len(), pair % self.responses.len())
    }

    pub fn gold_pair(&self, x: usize) -> usize {
        let p = &self.prompts[x];
        self.pair_index(p.gold_latent, p.gold_response)
    }

    /// Shared prefix tree over all joint sequences, built on first use.
    pub fn prefix_tree(&self) -> Arc<PrefixTree> {
        self.tree.get_or_init(|| Arc::new(PrefixTree::build(self))).clone()
    }

    /// Copy of this task with a different evaluator.
    pub fn with_evaluator(&self, evaluator: Evaluator) -> Result<GenerativeTask> {
        let mut t = self.clone();
        t.evaluator = evaluator;
        t.validate()?;
        Ok(t)
    }

    pub fn check_prompt(&self, x: usize) -> Result<()> {
        if x >= self.prompts.len() {
            return Err(Error::OutOfSpace { what: "prompt", index: x, size: self.prompts.len() });
        }
        Ok(())
    }

    pub fn check_pair(&self, z: usize, y: usize) -> Result<()> {
        if z >= self.latents.len() {
            return Err(Error::OutOfSpace { what: "latent", index: z, size: self.latents.len() });
        }
        if y >= self.responses.len() {
            return Err(Error::OutOfSpace {
                what: "response",
                index: y,
                size: self.responses.len(),
            });
        }
        Ok(())
    }

    pub fn is_correct_answer(&self, x: usize, y: usize) -> bool {
        self.prompts[x].gold_response == y
    }

    /// Verification under a given scope, independent of the evaluator kind.
    pub fn verified_under(&self, scope: VerifierScope, x: usize, z: usize, y: usize) -> bool {
        let p = &self.prompts[x];
        match scope {
            VerifierScope::Answer => y == p.gold_response,
            VerifierScope::AnswerAndTrace => y == p.gold_response && z == p.gold_latent,
        }
    }

    fn mismatches(&self, x: usize, z: usize, y: usize) -> usize {
        fn ham(a: &[TokenId], b: &[TokenId]) -> usize {
            let n = a.len().max(b.len());
            (0..n).filter(|&i| a.get(i) != b.get(i)).count()
        }
        let p = &self.prompts[x];
        ham(self.latents[z].ids(), self.latents[p.gold_latent].ids())
            + ham(self.responses[y].ids(), self.responses[p.gold_response].ids())
    }

    /// `R(x, z, y)` for soft-reward evaluators.
    pub fn soft_reward(&self, x: usize, z: usize, y: usize) -> Option<f64> {
        match &self.evaluator {
            Evaluator::SoftReward { shape, .. } => Some(match shape {
                RewardShape::Mismatch { penalty } => -penalty * self.mismatches(x, z, y) as f64,
                RewardShape::Verified { scope, penalty } => {
                    if self.verified_under(*scope, x, z, y) {
                        0.0
                    } else {
                        -penalty
                    }
                }
                RewardShape::Table { rewards } => rewards[x * self.num_pairs() + self.pair_index(z, y)],
            }),
            _ => None,
        }
    }

    /// `P(o | x, z, y)`.
    pub fn obs_prob(&self, x: usize, z: usize, y: usize, o: usize) -> f64 {
        match &self.evaluator {
            Evaluator::BinaryVerifier { scope } => {
                let acc = self.verified_under(*scope, x, z, y);
                match (o, acc) {
                    (OBS_ACCEPT, true) | (0, false) => 1.0,
                    _ => 0.0,
                }
            }
            Evaluator::SoftReward { beta, .. } => {
                let a = (self.soft_reward(x, z, y).unwrap() / beta).exp();
                if o == OBS_ACCEPT {
                    a
                } else {
                    1.0 - a
                }
            }
            Evaluator::Table { obs_size, probs } => {
                let base = (x * self.num_pairs() + self.pair_index(z, y)) * obs_size;
                probs[base + o]
            }
        }
    }

    /// `log P(o ∈ obs | x, z, y)`; `-inf` when the evaluator rules it out.
    pub fn log_obs_mass(&self, x: usize, z: usize, y: usize, obs: &[usize]) -> f64 {
        if let (Evaluator::SoftReward { beta, .. }, [OBS_ACCEPT]) = (&self.evaluator, obs) {
            return self.soft_reward(x, z, y).unwrap() / beta;
        }
        let m: f64 = obs.iter().map(|&o| self.obs_prob(x, z, y, o)).sum();
        if m > 0.0 {
            m.ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    /// True when every `P(o | x, z, y)` is exactly 0 or 1.
    pub fn is_hard(&self) -> bool {
        match &self.evaluator {
            Evaluator::BinaryVerifier { .. } => true,
            Evaluator::SoftReward { .. } => false,
            Evaluator::Table { probs, .. } => probs.iter().all(|&p| p == 0.0 || p == 1.0),
        }
    }

    /// Materialize an event for prompt `x`.
    pub fn event_mask(&self, x: usize, event: &EventSpec) -> Result<EventMask> {
        self.check_prompt(x)?;
        let p = &self.prompts[x];
        let mask = EventMask {
            latents: event.latent.materialize(p.gold_latent, self.num_latents()),
            responses: event.response.materialize(p.gold_response, self.num_responses()),
            obs: event.obs.materialize(OBS_ACCEPT, self.obs_size()),
        };
        if mask.is_empty() {
            return Err(Error::EmptyEvent { prompt: x });
        }
        Ok(mask)
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_pairs();
        if self.prompts.is_empty() || n == 0 {
            return Err(Error::InvalidTask("empty prompt, latent or response space".into()));
        }
        let total: f64 = self.prompts.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > 1e-12 || self.prompts.iter().any(|p| p.weight < 0.0) {
            return Err(Error::InvalidTask(format!("prompt weights sum to {total}")));
        }
        for seqs in [&self.latents, &self.responses] {
            if seqs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidTask("sequences must be strictly sorted".into()));
            }
        }
        for p in &self.prompts {
            self.check_pair(p.gold_latent, p.gold_response)?;
        }
        let longest = self.latents.iter().map(TokenSequence::len).max().unwrap_or(0)
            + self.responses.iter().map(TokenSequence::len).max().unwrap_or(0);
        if longest > self.horizon {
            return Err(Error::InvalidTask(format!(
                "joint length {longest} exceeds horizon {}",
                self.horizon
            )));
        }
        match &self.evaluator {
            Evaluator::BinaryVerifier { .. } => {}
            Evaluator::SoftReward { beta, shape } => {
                if !(*beta > 0.0) {
                    return Err(Error::InvalidTask("soft reward beta must be positive".into()));
                }
                match shape {
                    RewardShape::Mismatch { penalty } | RewardShape::Verified { penalty, .. } => {
                        if !(*penalty >= 0.0) {
                            return Err(Error::InvalidTask("reward penalty must be >= 0".into()));
                        }
                    }
                    RewardShape::Table { rewards } => {
                        if rewards.len() != self.num_prompts() * n {
                            return Err(Error::InvalidTask("reward table size mismatch".into()));
                        }
                        if rewards.iter().any(|&r| !(r <= 0.0)) {
                            return Err(Error::InvalidTask("soft rewards must be <= 0".into()));
                        }
                    }
                }
            }
            Evaluator::Table { obs_size, probs } => {
                if *obs_size < 1 || probs.len() != self.num_prompts() * n * obs_size {
                    return Err(Error::InvalidTask("observation table size mismatch".into()));
                }
                for row in probs.chunks(*obs_size) {
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-12 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                        return Err(Error::InvalidTask(format!("observation row sums to {s}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// All `(z, y, o)` in `Ẑ x Ŷ x Ô` for prompt `x`, ordered by latent, response, obs.
pub fn enumerate_event(task: &GenerativeTask, x: usize, event: &EventSpec) -> Result<Vec<Triple>> {
    let mask = task.event_mask(x, event)?;
    let mut out = Vec::with_capacity(mask.len());
    for &latent in &mask.latents {
        for &response in &mask.responses {
            for &obs in &mask.obs {
                out.push(Triple { latent, response, obs });
            }
        }
    }
    Ok(out)
}

struct RawTask {
    name: String,
    vocab: Vocabulary,
    horizon: usize,
    prompts: Vec<Prompt>,
    latents: Vec<TokenSequence>,
    responses: Vec<TokenSequence>,
}

fn check_cap(latents: u64, responses: u64, cap: u64) -> Result<()> {
    let size = latents.saturating_mul(responses);
    if size > cap {
        return Err(Error::CapExceeded { size, cap });
    }
    Ok(())
}

fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn sorted_sequences(
    mut raw: Vec<Vec<TokenId>>,
    vocab: &Vocabulary,
    horizon: usize,
) -> Result<Vec<TokenSequence>> {
    raw.sort();
    raw.dedup();
    raw.into_iter().map(|s| TokenSequence::new(s, vocab, horizon)).collect()
}

fn index_of(seqs: &[TokenSequence], ids: &[TokenId]) -> usize {
    seqs.binary_search_by(|s| s.ids().cmp(ids)).expect("gold sequence present")
}

/// Two `digits`-digit base-`base` numbers; the latent is a least-significant-first
/// scratchpad of `(sum digit, carry)` pairs and the response the `digits + 1`
/// digit sum.
pub fn make_carry_addition_task(digits: usize, base: usize, cap: u64) -> Result<RawTaskHandle> {
    if base < 2 || digits < 1 {
        return Err(Error::InvalidTask("carry addition needs base >= 2 and digits >= 1".into()));
    }
    let num_latents = (2 * base as u64).checked_pow(digits as u32).unwrap_or(u64::MAX);
    let num_responses = (base as u64).checked_pow(digits as u32 + 1).unwrap_or(u64::MAX);
    check_cap(num_latents, num_responses, cap)?;
    let b = base as u32;
    let digit = |d: u32| d + 1;
    let plus = b + 1;
    let carry = |c: u32| b + 2 + c;
    let mut names = vec!["<eos>".to_string()];
    names.extend((0..b).map(|d| format!("{d}")));
    names.push("+".into());
    names.push("c0".into());
    names.push("c1".into());
    let vocab = Vocabulary::new(names, 0)?;
    let horizon = 3 * digits + 3;

    let to_digits = |mut v: u64, width: usize| -> Vec<u32> {
        let mut out = vec![0u32; width];
        for slot in out.iter_mut().rev() {
            *slot = (v % base as u64) as u32;
            v /= base as u64;
        }
        out
    };

    let mut latent_raw = Vec::new();
    for code in 0..num_latents {
        let mut seq = Vec::with_capacity(2 * digits + 1);
        let mut c = code;
        for _ in 0..digits {
            let cell = (c % (2 * base as u64)) as u32;
            c /= 2 * base as u64;
            seq.push(digit(cell / 2));
            seq.push(carry(cell % 2));
        }
        seq.push(0);
        latent_raw.push(seq);
    }
    let latents = sorted_sequences(latent_raw, &vocab, horizon)?;
    let responses = sorted_sequences(
        (0..num_responses)
            .map(|v| {
                let mut s: Vec<u32> = to_digits(v, digits + 1).into_iter().map(digit).collect();
                s.push(0);
                s
            })
            .collect(),
        &vocab,
        horizon,
    )?;

    let span = (base as u64).pow(digits as u32);
    let mut prompts = Vec::with_capacity((span * span) as usize);
    for a in 0..span {
        for bb in 0..span {
            let ad = to_digits(a, digits);
            let bd = to_digits(bb, digits);
            let mut tokens: Vec<u32> = ad.iter().map(|&d| digit(d)).collect();
            tokens.push(plus);
            tokens.extend(bd.iter().map(|&d| digit(d)));
            tokens.push(0);
            let mut scratch = Vec::with_capacity(2 * digits + 1);
            let mut c = 0u32;
            for i in (0..digits).rev() {
                let s = ad[i] + bd[i] + c;
                scratch.push(digit(s % b));
                c = s / b;
                scratch.push(carry(c));
            }
            scratch.push(0);
            let mut sum: Vec<u32> = to_digits(a + bb, digits + 1).into_iter().map(digit).collect();
            sum.push(0);
            prompts.push(Prompt {
                tokens,
                weight: 0.0,
                gold_latent: index_of(&latents, &scratch),
                gold_response: index_of(&responses, &sum),
            });
        }
    }
    let w = uniform_weights(prompts.len());
    for (p, w) in prompts.iter_mut().zip(w) {
        p.weight = w;
    }
    Ok(RawTaskHandle(RawTask {
        name: format!("carry-d{digits}-b{base}"),
        vocab,
        horizon,
        prompts,
        latents,
        responses,
    }))
}

/// Deterministic finite automaton over `{a, b}` used by the trace task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dfa {
    pub transitions: Vec<[usize; 2]>,
    pub accepting: Vec<bool>,
}

impl Dfa {
    pub fn random(num_states: usize, rng: &mut impl Rng) -> Self {
        let transitions = (0..num_states)
            .map(|_| [rng.gen_range(0..num_states), rng.gen_range(0..num_states)])
            .collect();
        let mut accepting: Vec<bool> = (0..num_states).map(|_| rng.gen_bool(0.5)).collect();
        if accepting.iter().all(|&a| a) || accepting.iter().all(|&a| !a) {
            let i = rng.gen_range(0..num_states);
            accepting = (0..num_states).map(|s| s == i).collect();
        }
        Dfa { transitions, accepting }
    }

    /// States visited after each symbol, starting from state 0.
    pub fn run(&self, input: &[usize]) -> Vec<usize> {
        let mut s = 0;
        input
            .iter()
            .map(|&sym| {
                s = self.transitions[s][sym];
                s
            })
            .collect()
    }
}

/// Prompts are all input strings of length `input_len`; the latent is the
/// claimed state trajectory and the response an accept/reject token.
pub fn make_automaton_trace_task(
    num_states: usize,
    input_len: usize,
    seed: u64,
    cap: u64,
) -> Result<RawTaskHandle> {
    if num_states < 2 || input_len < 1 {
        return Err(Error::InvalidTask("automaton needs >= 2 states and input_len >= 1".into()));
    }
    let num_latents = (num_states as u64).checked_pow(input_len as u32).unwrap_or(u64::MAX);
    check_cap(num_latents, 2, cap)?;
    let mut r = rng::stream(seed, "automaton-dfa", &[num_states as u64, input_len as u64]);
    let dfa = Dfa::random(num_states, &mut r);
    let s = num_states as u32;
    let sym = |i: usize| 1 + i as u32;
    let state = |q: usize| 3 + q as u32;
    let (acc, rej) = (3 + s, 4 + s);
    let mut names = vec!["<eos>".to_string(), "a".into(), "b".into()];
    names.extend((0..num_states).map(|q| format!("q{q}")));
    names.push("acc".into());
    names.push("rej".into());
    let vocab = Vocabulary::new(names, 0)?;
    let horizon = input_len + 3;

    let mut latent_raw = Vec::new();
    for code in 0..num_latents {
        let mut c = code;
        let mut seq: Vec<u32> = (0..input_len)
            .map(|_| {
                let q = (c % num_states as u64) as usize;
                c /= num_states as u64;
                state(q)
            })
            .collect();
        seq.push(0);
        latent_raw.push(seq);
    }
    let latents = sorted_sequences(latent_raw, &vocab, horizon)?;
    let responses = sorted_sequences(vec![vec![acc, 0], vec![rej, 0]], &vocab, horizon)?;

    let n_inputs = 1usize << input_len;
    let mut prompts = Vec::with_capacity(n_inputs);
    for code in 0..n_inputs {
        let input: Vec<usize> = (0..input_len).rev().map(|i| (code >> i) & 1).collect();
        let mut tokens: Vec<u32> = input.iter().map(|&i| sym(i)).collect();
        tokens.push(0);
        let trace = dfa.run(&input);
        let mut z: Vec<u32> = trace.iter().map(|&q| state(q)).collect();
        z.push(0);
        let label = if dfa.accepting[*trace.last().unwrap()] { acc } else { rej };
        prompts.push(Prompt {
            tokens,
            weight: 1.0 / n_inputs as f64,
            gold_latent: index_of(&latents, &z),
            gold_response: index_of(&responses, &[label, 0]),
        });
    }
    Ok(RawTaskHandle(RawTask {
        name: format!("automaton-s{num_states}-l{input_len}"),
        vocab,
        horizon,
        prompts,
        latents,
        responses,
    }))
}

fn make_random_task(
    prompts: usize,
    latents: usize,
    responses: usize,
    alphabet: usize,
    max_len: usize,
    seed: u64,
    cap: u64,
) -> Result<RawTaskHandle> {
    if prompts < 1 || latents < 1 || responses < 1 || alphabet < 1 || max_len < 1 {
        return Err(Error::InvalidTask("random task sizes must be positive".into()));
    }
    check_cap(latents as u64, responses as u64, cap)?;
    let possible: u64 = (1..=max_len as u32).map(|l| (alphabet as u64).saturating_pow(l)).sum();
    if possible < latents.max(responses) as u64 {
        return Err(Error::InvalidTask(format!(
            "only {possible} sequences of length <= {max_len} over {alphabet} symbols"
        )));
    }
    let mut names = vec!["<eos>".to_string()];
    names.extend((0..alphabet).map(|i| format!("t{i}")));
    let vocab = Vocabulary::new(names, 0)?;
    let horizon = 2 * (max_len + 1);
    let mut r = rng::stream(seed, "random-task", &[]);
    let mut all: Vec<Vec<u32>> = Vec::new();
    for len in 1..=max_len {
        let count = alphabet.pow(len as u32);
        for code in 0..count {
            let mut c = code;
            let mut s: Vec<u32> = (0..len)
                .map(|_| {
                    let t = (c % alphabet) as u32 + 1;
                    c /= alphabet;
                    t
                })
                .collect();
            s.push(0);
            all.push(s);
        }
    }
    let mut pick = |k: usize| -> Result<Vec<TokenSequence>> {
        let mut pool = all.clone();
        pool.shuffle(&mut r);
        pool.truncate(k);
        sorted_sequences(pool, &vocab, horizon)
    };
    let z = pick(latents)?;
    let y = pick(responses)?;
    let raw_w: Vec<f64> = (0..prompts).map(|_| r.gen_range(0.5..1.5)).collect();
    let tot: f64 = raw_w.iter().sum();
    let mut ps: Vec<Prompt> = raw_w
        .iter()
        .enumerate()
        .map(|(i, w)| Prompt {
            tokens: vec![1 + (i % alphabet) as u32, 0],
            weight: w / tot,
            gold_latent: r.gen_range(0..latents),
            gold_response: r.gen_range(0..responses),
        })
        .collect();
    // exact normalization so the weights sum to 1 to the last ulp we can manage
    let s: f64 = ps.iter().map(|p| p.weight).sum();
    ps.iter_mut().for_each(|p| p.weight /= s);
    Ok(RawTaskHandle(RawTask {
        name: format!("random-p{prompts}-z{latents}-y{responses}"),
        vocab,
        horizon,
        prompts: ps,
        latents: z,
        responses: y,
    }))
}

fn make_tagged_task(inner: RawTask, num_tags: usize, cap: u64) -> Result<RawTaskHandle> {
    if num_tags < 1 {
        return Err(Error::InvalidTask("tagged task needs at least one tag".into()));
    }
    check_cap(num_tags as u64, inner.responses.len() as u64, cap)?;
    let base = inner.vocab.size() as u32;
    let mut names = inner.vocab.names.clone();
    names.extend((0..num_tags).map(|k| format!("<tag{k}>")));
    let vocab = Vocabulary::new(names, inner.vocab.eos())?;
    let max_y = inner.responses.iter().map(TokenSequence::len).max().unwrap_or(0);
    let horizon = max_y + 2;
    let latents = sorted_sequences(
        (0..num_tags as u32).map(|k| vec![base + k, inner.vocab.eos()]).collect(),
        &vocab,
        horizon,
    )?;
    let responses = inner
        .responses
        .iter()
        .map(|s| TokenSequence::new(s.ids().to_vec(), &vocab, horizon))
        .collect::<Result<Vec<_>>>()?;
    let prompts = inner
        .prompts
        .into_iter()
        .map(|p| Prompt { gold_latent: num_tags - 1, ..p })
        .collect();
    Ok(RawTaskHandle(RawTask {
        name: format!("tagged{num_tags}-{}", inner.name),
        vocab,
        horizon,
        prompts,
        latents,
        responses,
    }))
}

/// Opaque result of a generator before its evaluator is attached.
pub struct RawTaskHandle(RawTask);

fn build_raw(kind: &TaskKind, seed: u64, cap: u64) -> Result<RawTask> {
    let h = match kind {
        TaskKind::CarryAddition { digits, base } => make_carry_addition_task(*digits, *base, cap)?,
        TaskKind::AutomatonTrace { num_states, input_len } => {
            make_automaton_trace_task(*num_states, *input_len, seed, cap)?
        }
        TaskKind::Random { prompts, latents, responses, alphabet, max_len } => {
            make_random_task(*prompts, *latents, *responses, *alphabet, *max_len, seed, cap)?
        }
        TaskKind::Tagged { inner, num_tags } => {
            let raw = build_raw(inner, seed, cap)?;
            make_tagged_task(raw, *num_tags, cap)?
        }
    };
    Ok(h.0)
}

fn materialize_evaluator(spec: &EvaluatorSpec, raw: &RawTask, r: &mut impl Rng) -> Result<Evaluator> {
    let n = raw.latents.len() * raw.responses.len();
    let gold = |x: usize| raw.prompts[x].gold_latent * raw.responses.len() + raw.prompts[x].gold_response;
    Ok(match spec {
        EvaluatorSpec::Verifier { scope } => Evaluator::BinaryVerifier { scope: *scope },
        EvaluatorSpec::SoftMismatch { beta, penalty } => Evaluator::SoftReward {
            beta: *beta,
            shape: RewardShape::Mismatch { penalty: *penalty },
        },
        EvaluatorSpec::SoftVerified { beta, scope, penalty } => Evaluator::SoftReward {
            beta: *beta,
            shape: RewardShape::Verified { scope: *scope, penalty: *penalty },
        },
        EvaluatorSpec::RandomHard { accept_prob } => {
            let mut probs = Vec::with_capacity(raw.prompts.len() * n * 2);
            for x in 0..raw.prompts.len() {
                for p in 0..n {
                    let acc = p == gold(x) || r.gen_bool(accept_prob.clamp(0.0, 1.0));
                    probs.extend_from_slice(if acc { &[0.0, 1.0] } else { &[1.0, 0.0] });
                }
            }
            Evaluator::Table { obs_size: 2, probs }
        }
        EvaluatorSpec::RandomSoft { beta, scale } => {
            let mut rewards = Vec::with_capacity(raw.prompts.len() * n);
            for x in 0..raw.prompts.len() {
                for p in 0..n {
                    rewards.push(if p == gold(x) { 0.0 } else { -r.gen_range(0.0..=*scale) });
                }
            }
            Evaluator::SoftReward { beta: *beta, shape: RewardShape::Table { rewards } }
        }
        EvaluatorSpec::RandomTable { obs_size } => {
            let k = (*obs_size).max(1);
            let mut probs = Vec::with_capacity(raw.prompts.len() * n * k);
            for _ in 0..raw.prompts.len() * n {
                let raw_row: Vec<f64> = (0..k).map(|_| -r.gen_range(f64::EPSILON..1.0).ln()).collect();
                let s: f64 = raw_row.iter().sum();
                let mut row: Vec<f64> = raw_row.iter().map(|v| v / s).collect();
                let head: f64 = row[..k - 1].iter().sum();
                row[k - 1] = (1.0 - head).max(0.0);
                probs.extend(row);
            }
            Evaluator::Table { obs_size: k, probs }
        }
    })
}

/// Structured text description of a task and its target event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDocument {
    pub name: String,
    pub seed: u64,
    pub cap: u64,
    pub horizon: usize,
    pub vocab_size: usize,
    pub eos: TokenId,
    pub sizes: SpaceSizes,
    pub evaluator_kind: String,
    pub generator: TaskKind,
    pub evaluator: EvaluatorSpec,
    pub event: EventSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceSizes {
    pub prompts: usize,
    pub latents: usize,
    pub responses: usize,
    pub observations: usize,
}

impl TaskDocument {
    pub fn describe(task: &GenerativeTask, event: &EventSpec) -> Self {
        TaskDocument {
            name: task.name.clone(),
            seed: task.spec.seed,
            cap: task.spec.cap,
            horizon: task.horizon,
            vocab_size: task.vocab.size(),
            eos: task.vocab.eos(),
            sizes: SpaceSizes {
                prompts: task.num_prompts(),
                latents: task.num_latents(),
                responses: task.num_responses(),
                observations: task.obs_size(),
            },
            evaluator_kind: task.evaluator.kind_name().to_string(),
            generator: task.spec.generator.clone(),
            evaluator: task.spec.evaluator.clone(),
            event: event.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Rebuild the task and check it against the recorded summary.
    pub fn rebuild(&self) -> Result<(GenerativeTask, EventSpec)> {
        let spec = TaskSpec {
            generator: self.generator.clone(),
            seed: self.seed,
            evaluator: self.evaluator.clone(),
            cap: self.cap,
        };
        let task = spec.build()?;
        let again = TaskDocument::describe(&task, &self.event);
        if &again != self {
            return Err(Error::MismatchedTask(format!(
                "document for {} does not match rebuilt task",
                self.name
            )));
        }
        Ok((task, self.event.clone()))
    }
}

/// Small random task with fixed sizes; shorthand used by tests and the verify suite.
pub fn random_task(
    prompts: usize,
    latents: usize,
    responses: usize,
    seed: u64,
    evaluator: EvaluatorSpec,
) -> Result<GenerativeTask> {
    let alphabet = 3;
    let mut max_len = 1;
    while (1..=max_len as u32).map(|l| 3u64.pow(l)).sum::<u64>() < latents.max(responses) as u64 {
        max_len += 1;
    }
    TaskSpec::new(
        TaskKind::Random { prompts, latents, responses, alphabet, max_len },
        seed,
        evaluator,
    )
    .build()
}

/// Keys the pair indices by membership; handy for tests and samplers.
pub fn pair_set(task: &GenerativeTask, pairs: impl IntoIterator<Item = (usize, usize)>) -> BTreeSet<usize> {
    pairs.into_iter().map(|(z, y)| task.pair_index(z, y)).collect()
}
