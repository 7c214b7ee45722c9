//! Posterior summarization: a single greedy regression tree fit to the
//! per-subject posterior-mean effects ("fitting the fit"), and posterior
//! credible intervals for the subgroup-average effect in each leaf.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::draws::{DrawField, PosteriorDraws};
use crate::estimands::{quantile_sorted, Interval};

pub const DEFAULT_MAX_DEPTH: usize = 3;
pub const DEFAULT_MIN_LEAF_FRAC: f64 = 0.05;

/// One node of the summary tree. Splits are on the model's scaled
/// covariates but carry the raw-scale cutpoint for display.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum SummaryNode {
    Leaf {
        mean: f64,
        fraction: f64,
        /// Training-subject indices in this leaf.
        subjects: Vec<usize>,
    },
    Split {
        var: usize,
        var_name: String,
        /// Cut on the scaled covariate; left branch is `x < cut`.
        cut: f64,
        /// The same cut mapped back to the covariate's original scale.
        cut_raw: f64,
        mean: f64,
        fraction: f64,
        left: Box<SummaryNode>,
        right: Box<SummaryNode>,
    },
}

impl SummaryNode {
    pub fn mean(&self) -> f64 {
        match self {
            SummaryNode::Leaf { mean, .. } | SummaryNode::Split { mean, .. } => *mean,
        }
    }

    pub fn fraction(&self) -> f64 {
        match self {
            SummaryNode::Leaf { fraction, .. } | SummaryNode::Split { fraction, .. } => *fraction,
        }
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a SummaryNode>) {
        match self {
            SummaryNode::Leaf { .. } => out.push(self),
            SummaryNode::Split { left, right, .. } => {
                left.collect_leaves(out);
                right.collect_leaves(out);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryTree {
    pub root: SummaryNode,
    pub n_subjects: usize,
    pub max_depth: usize,
    pub min_leaf_frac: f64,
}

impl SummaryTree {
    /// Leaves in pre-order (left before right).
    pub fn leaves(&self) -> Vec<&SummaryNode> {
        let mut out = Vec::new();
        self.root.collect_leaves(&mut out);
        out
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    /// Total within-leaf sum of squared deviations from leaf means.
    pub fn within_leaf_sse(&self, target: &[f64]) -> f64 {
        self.leaves()
            .iter()
            .map(|l| match l {
                SummaryNode::Leaf { subjects, mean, .. } => subjects
                    .iter()
                    .map(|&i| (target[i] - mean) * (target[i] - mean))
                    .sum::<f64>(),
                _ => unreachable!(),
            })
            .sum()
    }

    /// Graphviz text for external rendering: internal nodes labeled by
    /// the raw-scale rule, every node annotated with its subgroup mean
    /// and sample fraction.
    pub fn to_graphviz(&self) -> String {
        let mut out = String::from("digraph summary {\n  node [shape=box];\n");
        let mut next_id = 0usize;
        fn rec(node: &SummaryNode, out: &mut String, next_id: &mut usize) -> usize {
            let id = *next_id;
            *next_id += 1;
            match node {
                SummaryNode::Leaf { mean, fraction, .. } => {
                    out.push_str(&format!(
                        "  n{id} [label=\"{:.3}\\n{:.1}%\"];\n",
                        mean,
                        fraction * 100.0
                    ));
                }
                SummaryNode::Split {
                    var_name,
                    cut_raw,
                    mean,
                    fraction,
                    left,
                    right,
                    ..
                } => {
                    out.push_str(&format!(
                        "  n{id} [label=\"{var_name} < {:.4}\\n{:.3}\\n{:.1}%\"];\n",
                        cut_raw,
                        mean,
                        fraction * 100.0
                    ));
                    let l = rec(left, out, next_id);
                    out.push_str(&format!("  n{id} -> n{l} [label=\"yes\"];\n"));
                    let r = rec(right, out, next_id);
                    out.push_str(&format!("  n{id} -> n{r} [label=\"no\"];\n"));
                }
            }
            id
        }
        rec(&self.root, &mut out, &mut next_id);
        out.push_str("}\n");
        out
    }
}

/// Greedy squared-error CART on the posterior means. At each node the
/// (covariate, cutpoint) minimizing the within-child sum of squares is
/// chosen; ties break to the lowest covariate index, then the lowest
/// cutpoint. Splitting stops at `max_depth`, when a child would fall
/// under `min_leaf_frac` of the sample, or when no split reduces the
/// sum of squares.
pub fn fit_the_fit(
    target: &[f64],
    ds: &Dataset,
    max_depth: usize,
    min_leaf_frac: f64,
) -> SummaryTree {
    let n = ds.n_subjects();
    assert_eq!(target.len(), n);
    let min_leaf = ((min_leaf_frac * n as f64).ceil() as usize).max(1);
    let all: Vec<usize> = (0..n).collect();
    let root = build_node(target, ds, &all, 0, max_depth, min_leaf, n);
    SummaryTree {
        root,
        n_subjects: n,
        max_depth,
        min_leaf_frac,
    }
}

fn node_mean(target: &[f64], subjects: &[usize]) -> f64 {
    subjects.iter().map(|&i| target[i]).sum::<f64>() / subjects.len() as f64
}

fn sse(target: &[f64], subjects: &[usize], mean: f64) -> f64 {
    subjects
        .iter()
        .map(|&i| (target[i] - mean) * (target[i] - mean))
        .sum()
}

fn build_node(
    target: &[f64],
    ds: &Dataset,
    subjects: &[usize],
    depth: usize,
    max_depth: usize,
    min_leaf: usize,
    n_total: usize,
) -> SummaryNode {
    let mean = node_mean(target, subjects);
    let fraction = subjects.len() as f64 / n_total as f64;
    let leaf = || SummaryNode::Leaf {
        mean,
        fraction,
        subjects: subjects.to_vec(),
    };
    if depth >= max_depth || subjects.len() < 2 * min_leaf {
        return leaf();
    }
    let parent_sse = sse(target, subjects, mean);

    // Best split across covariates and cutpoints. For each covariate,
    // sort the node's subjects and sweep prefix sums; candidate cuts are
    // midpoints between distinct consecutive values.
    let mut best: Option<(f64, usize, f64)> = None; // (sse, var, cut)
    for j in 0..ds.n_covariates() {
        let mut order: Vec<usize> = subjects.to_vec();
        order.sort_by(|&a, &b| {
            ds.row(a)[j]
                .partial_cmp(&ds.row(b)[j])
                .unwrap()
                .then(a.cmp(&b))
        });
        let vals: Vec<f64> = order.iter().map(|&i| ds.row(i)[j]).collect();
        let ys: Vec<f64> = order.iter().map(|&i| target[i]).collect();
        let total_sum: f64 = ys.iter().sum();
        let total_sq: f64 = ys.iter().map(|y| y * y).sum();
        let m = ys.len();
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for k in 0..m - 1 {
            left_sum += ys[k];
            left_sq += ys[k] * ys[k];
            if vals[k + 1] <= vals[k] {
                continue; // no cut separates equal values
            }
            let n_l = k + 1;
            let n_r = m - n_l;
            if n_l < min_leaf || n_r < min_leaf {
                continue;
            }
            let right_sum = total_sum - left_sum;
            let right_sq = total_sq - left_sq;
            let s = (left_sq - left_sum * left_sum / n_l as f64)
                + (right_sq - right_sum * right_sum / n_r as f64);
            let cut = 0.5 * (vals[k] + vals[k + 1]);
            if best.map_or(true, |(bs, _, _)| s < bs) {
                best = Some((s, j, cut));
            }
        }
    }
    let Some((best_sse, var, cut)) = best else {
        return leaf();
    };
    if best_sse >= parent_sse - 1e-12 * parent_sse.abs().max(1.0) {
        return leaf(); // nothing to explain
    }
    let (l_subj, r_subj): (Vec<usize>, Vec<usize>) =
        subjects.iter().partition(|&&i| ds.row(i)[var] < cut);
    let left = build_node(target, ds, &l_subj, depth + 1, max_depth, min_leaf, n_total);
    let right = build_node(target, ds, &r_subj, depth + 1, max_depth, min_leaf, n_total);
    let cut_raw = match &ds.scale_params[var] {
        Some(sp) => sp.unscale(cut),
        None => cut,
    };
    SummaryNode::Split {
        var,
        var_name: ds.schema[var].name.clone(),
        cut,
        cut_raw,
        mean,
        fraction,
        left: Box::new(left),
        right: Box::new(right),
    }
}

/// Posterior of the subgroup-average effect per leaf, with pairwise
/// exceedance probabilities between leaves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupPosterior {
    /// Per leaf (pre-order): posterior mean of the subgroup average.
    pub mean: Vec<f64>,
    pub ci90: Vec<Interval>,
    pub fraction: Vec<f64>,
    /// `exceedance[j][k]` = P(avg_j > avg_k) across draws; diagonal 0.5
    /// by convention.
    pub exceedance: Vec<Vec<f64>>,
}

pub fn subgroup_posterior(tree: &SummaryTree, draws: &PosteriorDraws) -> SubgroupPosterior {
    assert_eq!(
        draws.n_points, tree.n_subjects,
        "draws must cover every training subject"
    );
    let leaves = tree.leaves();
    let n_draws = draws.n_draws();
    // Per leaf, the subgroup average at each draw.
    let mut avg: Vec<Vec<f64>> = Vec::with_capacity(leaves.len());
    let mut fraction = Vec::with_capacity(leaves.len());
    for leaf in &leaves {
        let SummaryNode::Leaf { subjects, fraction: frac, .. } = leaf else {
            unreachable!()
        };
        assert!(!subjects.is_empty(), "empty summary leaf");
        fraction.push(*frac);
        let mut per_draw = Vec::with_capacity(n_draws);
        for d in 0..n_draws {
            let s: f64 = subjects
                .iter()
                .map(|&i| draws.value(DrawField::Late, d, i))
                .sum();
            per_draw.push(s / subjects.len() as f64);
        }
        avg.push(per_draw);
    }
    let mean: Vec<f64> = avg
        .iter()
        .map(|a| a.iter().sum::<f64>() / n_draws as f64)
        .collect();
    let ci90: Vec<Interval> = avg
        .iter()
        .map(|a| {
            let mut s = a.clone();
            s.sort_by(|x, y| x.partial_cmp(y).unwrap());
            Interval {
                lo: quantile_sorted(&s, 0.05),
                hi: quantile_sorted(&s, 0.95),
            }
        })
        .collect();
    let k = leaves.len();
    let mut exceedance = vec![vec![0.5; k]; k];
    for j in 0..k {
        for l in 0..k {
            if j == l {
                continue;
            }
            let count = (0..n_draws).filter(|&d| avg[j][d] > avg[l][d]).count();
            exceedance[j][l] = count as f64 / n_draws as f64;
        }
    }
    SubgroupPosterior {
        mean,
        ci90,
        fraction,
        exceedance,
    }
}
