//! Regression tree with variance-reduction splits, built from scratch.
//!
//! Recursive binary splitting on axis-aligned thresholds: at every node the
//! split minimizing the summed squared error of the two children is chosen,
//! with tie-breaking on (feature, threshold) so training is deterministic.
//! Leaves predict the mean of their training targets and keep min/max/count
//! so a prediction's leaf spread is inspectable.

use serde::{Deserialize, Serialize};

pub const N_FEATURES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafStats {
    pub mean: f64,
    pub count: usize,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf(LeafStats),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub max_depth: usize,
    pub min_leaf: usize,
    root: TreeNode,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    sse: f64,
}

impl RegressionTree {
    /// Fits a tree on rows of `[batch, share]` features.
    ///
    /// Panics if `xs` and `ys` are empty or have different lengths; callers
    /// validate sample counts beforehand.
    pub fn fit(xs: &[[f64; N_FEATURES]], ys: &[f64], max_depth: usize, min_leaf: usize) -> Self {
        assert_eq!(xs.len(), ys.len());
        assert!(!xs.is_empty());
        let idx: Vec<usize> = (0..xs.len()).collect();
        let root = build_node(xs, ys, idx, max_depth, min_leaf.max(1));
        RegressionTree {
            max_depth,
            min_leaf: min_leaf.max(1),
            root,
        }
    }

    pub fn predict(&self, x: [f64; N_FEATURES]) -> f64 {
        self.leaf(x).mean
    }

    /// The leaf a point falls into, with its training-time statistics.
    pub fn leaf(&self, x: [f64; N_FEATURES]) -> LeafStats {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf(stats) => return *stats,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        fn count(node: &TreeNode) -> usize {
            match node {
                TreeNode::Leaf(_) => 1,
                TreeNode::Split { left, right, .. } => count(left) + count(right),
            }
        }
        count(&self.root)
    }
}

fn leaf_of(ys: &[f64], idx: &[usize]) -> TreeNode {
    let mut sum = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &i in idx {
        sum += ys[i];
        lo = lo.min(ys[i]);
        hi = hi.max(ys[i]);
    }
    TreeNode::Leaf(LeafStats {
        mean: sum / idx.len() as f64,
        count: idx.len(),
        y_min: lo,
        y_max: hi,
    })
}

fn build_node(
    xs: &[[f64; N_FEATURES]],
    ys: &[f64],
    idx: Vec<usize>,
    depth_left: usize,
    min_leaf: usize,
) -> TreeNode {
    if depth_left == 0 || idx.len() < 2 * min_leaf {
        return leaf_of(ys, &idx);
    }
    let Some(split) = best_split(xs, ys, &idx, min_leaf) else {
        return leaf_of(ys, &idx);
    };
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
        .into_iter()
        .partition(|&i| xs[i][split.feature] <= split.threshold);
    TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left: Box::new(build_node(xs, ys, left_idx, depth_left - 1, min_leaf)),
        right: Box::new(build_node(xs, ys, right_idx, depth_left - 1, min_leaf)),
    }
}

/// Scans every feature for the threshold minimizing child SSE. Returns None
/// when no split leaves both children with `min_leaf` samples or none reduces
/// the error.
fn best_split(
    xs: &[[f64; N_FEATURES]],
    ys: &[f64],
    idx: &[usize],
    min_leaf: usize,
) -> Option<BestSplit> {
    let n = idx.len() as f64;
    let total_sum: f64 = idx.iter().map(|&i| ys[i]).sum();
    let total_sq: f64 = idx.iter().map(|&i| ys[i] * ys[i]).sum();
    let parent_sse = total_sq - total_sum * total_sum / n;
    if parent_sse <= 1e-12 {
        return None;
    }

    let mut best: Option<BestSplit> = None;
    let mut order: Vec<usize> = idx.to_vec();
    for feature in 0..N_FEATURES {
        order.sort_by(|&a, &b| {
            xs[a][feature]
                .partial_cmp(&xs[b][feature])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for (k, &i) in order.iter().enumerate().take(order.len() - 1) {
            left_sum += ys[i];
            left_sq += ys[i] * ys[i];
            let next = order[k + 1];
            if xs[i][feature] == xs[next][feature] {
                continue;
            }
            let left_n = (k + 1) as f64;
            let right_n = n - left_n;
            if (k + 1) < min_leaf || (order.len() - k - 1) < min_leaf {
                continue;
            }
            let right_sum = total_sum - left_sum;
            let right_sq = total_sq - left_sq;
            let sse = (left_sq - left_sum * left_sum / left_n)
                + (right_sq - right_sum * right_sum / right_n);
            let threshold = 0.5 * (xs[i][feature] + xs[next][feature]);
            let better = match &best {
                None => sse < parent_sse - 1e-12,
                Some(b) => sse < b.sse - 1e-12,
            };
            if better {
                best = Some(BestSplit {
                    feature,
                    threshold,
                    sse,
                });
            }
        }
    }
    best
}
