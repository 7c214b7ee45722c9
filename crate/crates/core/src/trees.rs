//! Binary decision trees with axis-aligned rules, their evaluation
//! function, the branching-process prior, and grow/prune structure
//! proposals. Shared by all four ensembles and by the probit-BART
//! baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::priors::EnsembleHyper;

/// Base probability that a node at depth 0 splits; depth `d` splits with
/// probability `SPLIT_BASE * (1 + d)^-SPLIT_POWER`.
pub const SPLIT_BASE: f64 = 0.95;
pub const SPLIT_POWER: f64 = 2.0;
/// Numerical guard: prior mass beyond this depth is negligible, so nodes
/// at or below it never split.
pub const MAX_DEPTH: u8 = 12;

/// Probability that a node at `depth` becomes internal.
pub fn split_prob(depth: u8) -> f64 {
    if depth >= MAX_DEPTH {
        0.0
    } else {
        SPLIT_BASE * (1.0 + depth as f64).powf(-SPLIT_POWER)
    }
}

/// Covariate kind as the tree machinery sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovKind {
    Continuous,
    Categorical { n_levels: u8 },
}

/// Decision rule at an internal node. A point goes left iff it satisfies
/// the rule: `x_j < cut` for continuous, `level in goes_left` for
/// categorical (`goes_left` is a bitmask over levels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitRule {
    Continuous { var: usize, cut: f64 },
    Categorical { var: usize, goes_left: u64 },
}

impl SplitRule {
    pub fn var(&self) -> usize {
        match *self {
            SplitRule::Continuous { var, .. } | SplitRule::Categorical { var, .. } => var,
        }
    }

    pub fn goes_left(&self, x: &[f64]) -> bool {
        match *self {
            SplitRule::Continuous { var, cut } => x[var] < cut,
            SplitRule::Categorical { var, goes_left } => {
                let level = x[var] as u64;
                goes_left >> level & 1 == 1
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum NodeKind {
    Leaf { jump: f64 },
    Internal { rule: SplitRule, left: u32, right: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub parent: Option<u32>,
    pub depth: u8,
    pub kind: NodeKind,
}

/// A binary regression tree stored in an arena. Node 0 is the root;
/// pruned slots go on a free list and keep surviving node indices stable,
/// which lets per-subject leaf caches survive accepted moves.
#[derive(Debug, Clone)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    free: Vec<u32>,
}

/// Per-covariate available value sets along a root-to-node path.
#[derive(Debug, Clone)]
pub struct Avail {
    /// `(lo, hi)` interval for continuous covariates.
    pub cont: Vec<(f64, f64)>,
    /// Bitmask of still-available levels for categorical covariates.
    pub cat: Vec<u64>,
}

impl Avail {
    pub fn root(kinds: &[CovKind]) -> Avail {
        let p = kinds.len();
        let mut cat = vec![0u64; p];
        for (j, k) in kinds.iter().enumerate() {
            if let CovKind::Categorical { n_levels } = k {
                cat[j] = if *n_levels >= 64 {
                    u64::MAX
                } else {
                    (1u64 << n_levels) - 1
                };
            }
        }
        Avail {
            cont: vec![(0.0, 1.0); p],
            cat,
        }
    }

    /// Restrict by a rule, following the left or right branch.
    pub fn restrict(&mut self, rule: &SplitRule, left: bool) {
        match *rule {
            SplitRule::Continuous { var, cut } => {
                if left {
                    self.cont[var].1 = self.cont[var].1.min(cut);
                } else {
                    self.cont[var].0 = self.cont[var].0.max(cut);
                }
            }
            SplitRule::Categorical { var, goes_left } => {
                if left {
                    self.cat[var] &= goes_left;
                } else {
                    self.cat[var] &= !goes_left;
                }
            }
        }
    }

    /// Is any decision rule drawable here?
    pub fn has_valid_rule(&self, kinds: &[CovKind]) -> bool {
        kinds.iter().enumerate().any(|(j, k)| match k {
            CovKind::Continuous => self.cont[j].1 > self.cont[j].0,
            CovKind::Categorical { .. } => self.cat[j].count_ones() >= 2,
        })
    }
}

impl DecisionTree {
    /// A single-leaf tree.
    pub fn root_only(jump: f64) -> DecisionTree {
        DecisionTree {
            nodes: vec![Node {
                parent: None,
                depth: 0,
                kind: NodeKind::Leaf { jump },
            }],
            free: Vec::new(),
        }
    }

    pub fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn set_jump(&mut self, leaf: usize, jump: f64) {
        match &mut self.nodes[leaf].kind {
            NodeKind::Leaf { jump: j } => *j = jump,
            _ => panic!("set_jump on internal node"),
        }
    }

    /// Index of the leaf that `x` reaches.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut cur = 0usize;
        loop {
            match &self.nodes[cur].kind {
                NodeKind::Leaf { .. } => return cur,
                NodeKind::Internal { rule, left, right } => {
                    cur = if rule.goes_left(x) {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    /// `g(x; T, B)`: the jump of the leaf containing `x`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)].kind {
            NodeKind::Leaf { jump } => jump,
            _ => unreachable!(),
        }
    }

    fn is_free(&self, idx: usize) -> bool {
        self.free.contains(&(idx as u32))
    }

    /// Live leaf node indices.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| !self.is_free(i) && matches!(self.nodes[i].kind, NodeKind::Leaf { .. }))
            .collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    /// Internal nodes whose two children are both leaves.
    pub fn prunable(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| {
                if self.is_free(i) {
                    return false;
                }
                match self.nodes[i].kind {
                    NodeKind::Internal { left, right, .. } => {
                        matches!(self.nodes[left as usize].kind, NodeKind::Leaf { .. })
                            && matches!(self.nodes[right as usize].kind, NodeKind::Leaf { .. })
                    }
                    _ => false,
                }
            })
            .collect()
    }

    /// Available value sets at a node, from the ancestor rules.
    pub fn availability(&self, node: usize, kinds: &[CovKind]) -> Avail {
        let mut path = Vec::new();
        let mut cur = node;
        while let Some(par) = self.nodes[cur].parent {
            path.push(cur);
            cur = par as usize;
        }
        let mut avail = Avail::root(kinds);
        let mut at = cur; // root
        for &child in path.iter().rev() {
            if let NodeKind::Internal { rule, left, .. } = &self.nodes[at].kind {
                avail.restrict(rule, *left as usize == child);
            }
            at = child;
        }
        avail
    }

    /// Leaves that can legally be grown: depth below the cap and at least
    /// one drawable rule.
    pub fn growable_leaves(&self, kinds: &[CovKind]) -> Vec<usize> {
        self.leaves()
            .into_iter()
            .filter(|&l| {
                self.nodes[l].depth < MAX_DEPTH
                    && self.availability(l, kinds).has_valid_rule(kinds)
            })
            .collect()
    }

    /// Turn `leaf` into an internal node with two fresh leaf children.
    /// Returns the child indices `(left, right)`.
    pub fn grow(&mut self, leaf: usize, rule: SplitRule) -> (usize, usize) {
        assert!(matches!(self.nodes[leaf].kind, NodeKind::Leaf { .. }));
        let depth = self.nodes[leaf].depth + 1;
        let mut alloc = |node: Node| -> u32 {
            if let Some(idx) = self.free.pop() {
                self.nodes[idx as usize] = node;
                idx
            } else {
                self.nodes.push(node);
                (self.nodes.len() - 1) as u32
            }
        };
        let left = alloc(Node {
            parent: Some(leaf as u32),
            depth,
            kind: NodeKind::Leaf { jump: 0.0 },
        });
        let right = alloc(Node {
            parent: Some(leaf as u32),
            depth,
            kind: NodeKind::Leaf { jump: 0.0 },
        });
        self.nodes[leaf].kind = NodeKind::Internal { rule, left, right };
        (left as usize, right as usize)
    }

    /// Collapse a prunable internal node back to a leaf.
    pub fn prune(&mut self, node: usize) {
        let (left, right) = match self.nodes[node].kind {
            NodeKind::Internal { left, right, .. } => (left, right),
            _ => panic!("prune on leaf"),
        };
        assert!(matches!(self.nodes[left as usize].kind, NodeKind::Leaf { .. }));
        assert!(matches!(self.nodes[right as usize].kind, NodeKind::Leaf { .. }));
        self.free.push(left);
        self.free.push(right);
        self.nodes[node].kind = NodeKind::Leaf { jump: 0.0 };
    }

    /// Arena capacity including free slots; valid node indices are below
    /// this.
    pub fn arena_len(&self) -> usize {
        self.nodes.len()
    }

    /// Jump of the leaf at `idx`; panics on internal nodes.
    pub fn jump_at(&self, idx: usize) -> f64 {
        match self.nodes[idx].kind {
            NodeKind::Leaf { jump } => jump,
            _ => panic!("jump_at on internal node"),
        }
    }

    /// Accumulate per-covariate decision-rule counts into `counts`.
    pub fn add_split_counts(&self, counts: &mut [usize]) {
        for idx in 0..self.nodes.len() {
            if self.is_free(idx) {
                continue;
            }
            if let NodeKind::Internal { rule, .. } = &self.nodes[idx].kind {
                counts[rule.var()] += 1;
            }
        }
    }

    /// Pre-order nested representation for JSON persistence.
    pub fn to_pre_order(&self) -> TreeJson {
        fn rec(t: &DecisionTree, idx: usize) -> TreeJson {
            match &t.nodes[idx].kind {
                NodeKind::Leaf { jump } => TreeJson::Leaf { jump: *jump },
                NodeKind::Internal { rule, left, right } => TreeJson::Split {
                    rule: *rule,
                    left: Box::new(rec(t, *left as usize)),
                    right: Box::new(rec(t, *right as usize)),
                },
            }
        }
        rec(self, 0)
    }

    pub fn from_pre_order(json: &TreeJson) -> DecisionTree {
        fn rec(t: &mut DecisionTree, idx: usize, json: &TreeJson) {
            match json {
                TreeJson::Leaf { jump } => t.set_jump(idx, *jump),
                TreeJson::Split { rule, left, right } => {
                    let (l, r) = t.grow(idx, *rule);
                    rec(t, l, left);
                    rec(t, r, right);
                }
            }
        }
        let mut tree = DecisionTree::root_only(0.0);
        rec(&mut tree, 0, json);
        tree
    }
}

/// Serializable pre-order tree form (node kind, rule, jump).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeJson {
    Leaf {
        jump: f64,
    },
    Split {
        rule: SplitRule,
        left: Box<TreeJson>,
        right: Box<TreeJson>,
    },
}

/// Draw a decision rule at a node with availability `avail`. The splitting
/// variable is drawn from `theta` renormalized over variables that still
/// admit a rule; continuous cutpoints are uniform on the available
/// interval, categorical subsets uniform over non-trivial subsets.
///
/// Returns the rule and its log density, or `None` if no rule is valid.
pub fn sample_rule<R: Rng + ?Sized>(
    avail: &Avail,
    kinds: &[CovKind],
    theta: &[f64],
    rng: &mut R,
) -> Option<(SplitRule, f64)> {
    let valid: Vec<usize> = (0..kinds.len())
        .filter(|&j| match kinds[j] {
            CovKind::Continuous => avail.cont[j].1 > avail.cont[j].0,
            CovKind::Categorical { .. } => avail.cat[j].count_ones() >= 2,
        })
        .collect();
    if valid.is_empty() {
        return None;
    }
    let z: f64 = valid.iter().map(|&j| theta[j]).sum();
    let mut u = rng.gen::<f64>() * z;
    let mut var = *valid.last().unwrap();
    for &j in &valid {
        u -= theta[j];
        if u <= 0.0 {
            var = j;
            break;
        }
    }
    let log_theta = (theta[var] / z).ln();
    match kinds[var] {
        CovKind::Continuous => {
            let (lo, hi) = avail.cont[var];
            let cut = loop {
                let c = lo + rng.gen::<f64>() * (hi - lo);
                if c > lo && c < hi {
                    break c;
                }
            };
            Some((
                SplitRule::Continuous { var, cut },
                log_theta - (hi - lo).ln(),
            ))
        }
        CovKind::Categorical { .. } => {
            let mask = avail.cat[var];
            let k = mask.count_ones();
            let goes_left = loop {
                let mut sub = 0u64;
                let mut m = mask;
                while m != 0 {
                    let bit = m & m.wrapping_neg();
                    if rng.gen::<bool>() {
                        sub |= bit;
                    }
                    m ^= bit;
                }
                if sub != 0 && sub != mask {
                    break sub;
                }
            };
            let n_subsets = (1u64 << k) - 2;
            Some((
                SplitRule::Categorical { var, goes_left },
                log_theta - (n_subsets as f64).ln(),
            ))
        }
    }
}

/// Log density of a given rule under the prior at a node with `avail`.
pub fn log_rule_density(rule: &SplitRule, avail: &Avail, kinds: &[CovKind], theta: &[f64]) -> f64 {
    let valid: Vec<usize> = (0..kinds.len())
        .filter(|&j| match kinds[j] {
            CovKind::Continuous => avail.cont[j].1 > avail.cont[j].0,
            CovKind::Categorical { .. } => avail.cat[j].count_ones() >= 2,
        })
        .collect();
    let z: f64 = valid.iter().map(|&j| theta[j]).sum();
    let var = rule.var();
    let log_theta = (theta[var] / z).ln();
    match *rule {
        SplitRule::Continuous { var, .. } => log_theta - (avail.cont[var].1 - avail.cont[var].0).ln(),
        SplitRule::Categorical { var, .. } => {
            let k = avail.cat[var].count_ones();
            log_theta - (((1u64 << k) - 2) as f64).ln()
        }
    }
}

/// Log prior probability (density) of a tree structure together with its
/// decision rules, under splitting probabilities `theta`.
pub fn log_structure_prior(tree: &DecisionTree, kinds: &[CovKind], theta: &[f64]) -> f64 {
    fn rec(
        tree: &DecisionTree,
        idx: usize,
        avail: &Avail,
        kinds: &[CovKind],
        theta: &[f64],
    ) -> f64 {
        let node = tree.node(idx);
        match &node.kind {
            NodeKind::Leaf { .. } => {
                if node.depth < MAX_DEPTH && avail.has_valid_rule(kinds) {
                    (1.0 - split_prob(node.depth)).ln()
                } else {
                    0.0
                }
            }
            NodeKind::Internal { rule, left, right } => {
                let mut lp = split_prob(node.depth).ln()
                    + log_rule_density(rule, avail, kinds, theta);
                let mut left_avail = avail.clone();
                left_avail.restrict(rule, true);
                let mut right_avail = avail.clone();
                right_avail.restrict(rule, false);
                lp += rec(tree, *left as usize, &left_avail, kinds, theta);
                lp += rec(tree, *right as usize, &right_avail, kinds, theta);
                lp
            }
        }
    }
    rec(tree, 0, &Avail::root(kinds), kinds, theta)
}

/// Draw a whole tree from the branching-process prior, with leaf jumps
/// from `Normal(leaf_mean, leaf_sd^2)`.
pub fn sample_tree_from_prior<R: Rng + ?Sized>(
    kinds: &[CovKind],
    theta: &[f64],
    leaf_mean: f64,
    leaf_sd: f64,
    rng: &mut R,
) -> DecisionTree {
    fn rec<R: Rng + ?Sized>(
        tree: &mut DecisionTree,
        idx: usize,
        avail: &Avail,
        kinds: &[CovKind],
        theta: &[f64],
        leaf_mean: f64,
        leaf_sd: f64,
        rng: &mut R,
    ) {
        let depth = tree.node(idx).depth;
        if rng.gen::<f64>() < split_prob(depth) {
            if let Some((rule, _)) = sample_rule(avail, kinds, theta, rng) {
                let (l, r) = tree.grow(idx, rule);
                let mut left_avail = avail.clone();
                left_avail.restrict(&rule, true);
                let mut right_avail = avail.clone();
                right_avail.restrict(&rule, false);
                rec(tree, l, &left_avail, kinds, theta, leaf_mean, leaf_sd, rng);
                rec(tree, r, &right_avail, kinds, theta, leaf_mean, leaf_sd, rng);
                return;
            }
            // No covariate admits a rule here; stay a leaf.
        }
        let z: f64 = rng.sample(rand::distributions::Open01);
        let jump = leaf_mean + leaf_sd * crate::probit::phi_inv(z);
        tree.set_jump(idx, jump);
    }
    let mut tree = DecisionTree::root_only(0.0);
    let avail = Avail::root(kinds);
    rec(&mut tree, 0, &avail, kinds, theta, leaf_mean, leaf_sd, rng);
    tree
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Grow,
    Prune,
}

/// A proposed structure move. `log_ratio` is the log of
/// `prior(T') q(T|T') / (prior(T) q(T'|T))`; the likelihood ratio is the
/// caller's business.
#[derive(Debug, Clone)]
pub struct StructureProposal {
    pub tree: DecisionTree,
    pub kind: MoveKind,
    /// Grown leaf (now internal in the candidate) or pruned internal node
    /// (now a leaf). Index valid in both trees.
    pub node: usize,
    /// Children of `node`: fresh leaves in the candidate for grow, the
    /// removed leaves of the current tree for prune.
    pub left: usize,
    pub right: usize,
    pub rule: SplitRule,
    pub log_ratio: f64,
}

/// Propose growing a uniformly chosen growable leaf with a prior-drawn
/// rule. `None` when no leaf can be grown.
pub fn grow_proposal<R: Rng + ?Sized>(
    tree: &DecisionTree,
    kinds: &[CovKind],
    theta: &[f64],
    rng: &mut R,
) -> Option<StructureProposal> {
    let growable = tree.growable_leaves(kinds);
    if growable.is_empty() {
        return None;
    }
    let leaf = growable[rng.gen_range(0..growable.len())];
    let avail = tree.availability(leaf, kinds);
    let (rule, log_rule) = sample_rule(&avail, kinds, theta, rng)?;
    let depth = tree.node(leaf).depth;

    let mut candidate = tree.clone();
    let (left, right) = candidate.grow(leaf, rule);

    let child_leaf_logprob = |branch_left: bool| -> f64 {
        let mut child_avail = avail.clone();
        child_avail.restrict(&rule, branch_left);
        if depth + 1 < MAX_DEPTH && child_avail.has_valid_rule(kinds) {
            (1.0 - split_prob(depth + 1)).ln()
        } else {
            0.0
        }
    };
    let log_prior_ratio = split_prob(depth).ln() + log_rule
        + child_leaf_logprob(true)
        + child_leaf_logprob(false)
        - (1.0 - split_prob(depth)).ln();
    let n_prunable_new = candidate.prunable().len();
    let log_prop_ratio =
        (growable.len() as f64).ln() - (n_prunable_new as f64).ln() - log_rule;
    Some(StructureProposal {
        tree: candidate,
        kind: MoveKind::Grow,
        node: leaf,
        left,
        right,
        rule,
        log_ratio: log_prior_ratio + log_prop_ratio,
    })
}

/// Propose pruning a uniformly chosen internal node with two leaf
/// children. `None` when nothing can be pruned.
pub fn prune_proposal<R: Rng + ?Sized>(
    tree: &DecisionTree,
    kinds: &[CovKind],
    theta: &[f64],
    rng: &mut R,
) -> Option<StructureProposal> {
    let prunable = tree.prunable();
    if prunable.is_empty() {
        return None;
    }
    let node = prunable[rng.gen_range(0..prunable.len())];
    let (rule, left, right) = match tree.node(node).kind {
        NodeKind::Internal { rule, left, right } => (rule, left as usize, right as usize),
        _ => unreachable!(),
    };
    let avail = tree.availability(node, kinds);
    let depth = tree.node(node).depth;
    let log_rule = log_rule_density(&rule, &avail, kinds, theta);

    let mut candidate = tree.clone();
    candidate.prune(node);

    let child_leaf_logprob = |branch_left: bool| -> f64 {
        let mut child_avail = avail.clone();
        child_avail.restrict(&rule, branch_left);
        if depth + 1 < MAX_DEPTH && child_avail.has_valid_rule(kinds) {
            (1.0 - split_prob(depth + 1)).ln()
        } else {
            0.0
        }
    };
    let log_prior_ratio = (1.0 - split_prob(depth)).ln()
        - split_prob(depth).ln()
        - log_rule
        - child_leaf_logprob(true)
        - child_leaf_logprob(false);
    let n_growable_new = candidate.growable_leaves(kinds).len();
    let log_prop_ratio =
        (prunable.len() as f64).ln() - (n_growable_new as f64).ln() + log_rule;
    Some(StructureProposal {
        tree: candidate,
        kind: MoveKind::Prune,
        node,
        left,
        right,
        rule,
        log_ratio: log_prior_ratio + log_prop_ratio,
    })
}

/// Pick grow or prune with probability 1/2 each and build the proposal.
/// `None` counts as a Metropolis-Hastings rejection.
pub fn propose_structure<R: Rng + ?Sized>(
    tree: &DecisionTree,
    kinds: &[CovKind],
    theta: &[f64],
    rng: &mut R,
) -> Option<StructureProposal> {
    if rng.gen::<bool>() {
        grow_proposal(tree, kinds, theta, rng)
    } else {
        prune_proposal(tree, kinds, theta, rng)
    }
}

/// An ensemble of `M` trees with its splitting-probability simplex and
/// sparsity scalar. The per-leaf jump prior is
/// `Normal(beta0/M, sigma^2/M)`, so the ensemble sum has marginal prior
/// `Normal(beta0, sigma^2)` at every point.
#[derive(Debug, Clone)]
pub struct TreeEnsemble {
    pub trees: Vec<DecisionTree>,
    pub theta: Vec<f64>,
    pub xi: f64,
    pub hyper: EnsembleHyper,
}

impl TreeEnsemble {
    /// All trees root-only with jump `beta0/M`; uniform theta; xi at its
    /// prior median.
    pub fn new_root_only(hyper: EnsembleHyper, p: usize) -> TreeEnsemble {
        let m = hyper.m;
        let trees = (0..m)
            .map(|_| DecisionTree::root_only(hyper.beta0 / m as f64))
            .collect();
        TreeEnsemble {
            trees,
            theta: vec![1.0 / p as f64; p],
            // Median of Beta(0.5, 1) on xi/(xi+p) is 1/4, so xi = p/3.
            xi: p as f64 / 3.0,
            hyper,
        }
    }

    pub fn leaf_prior_mean(&self) -> f64 {
        self.hyper.beta0 / self.hyper.m as f64
    }

    pub fn leaf_prior_var(&self) -> f64 {
        self.hyper.sigma * self.hyper.sigma / self.hyper.m as f64
    }

    /// Sum of tree evaluations at `x`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.evaluate(x)).sum()
    }

    /// Number of decision rules using each covariate, across all trees.
    pub fn split_counts(&self, p: usize) -> Vec<usize> {
        let mut counts = vec![0usize; p];
        for tree in &self.trees {
            tree.add_split_counts(&mut counts);
        }
        counts
    }
}
