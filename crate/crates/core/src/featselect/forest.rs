//! Random forest regressor used for importance-based feature ranking:
//! bootstrap-sampled regression trees with axis-aligned splits, leaf means,
//! a sqrt-F feature subsample per split, and variance-reduction importances.

use rand::Rng;
use rayon::prelude::*;

use crate::rng::rng_from;

const SALT_TREE: u64 = 0x5452_4545;

/// Forest shape knobs.
#[derive(Debug, Clone, Copy)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// One regression tree stored as an arena with the root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Fitted forest with per-feature importances (normalized total variance
/// reduction; all zeros when no tree ever split).
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub feature_importances: Vec<f64>,
}

impl ForestModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        sum / self.trees.len() as f64
    }
}

/// Sum and sum-of-squares accumulator for O(1) variance arithmetic.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sq += v * v;
    }
    fn sse(&self) -> f64 {
        (self.sq - self.sum * self.sum / self.n).max(0.0)
    }
    fn mean(&self) -> f64 {
        self.sum / self.n
    }
}

struct TreeBuilder<'a> {
    x: &'a [f64],
    y: &'a [f64],
    n_features: usize,
    max_depth: usize,
    per_split: usize,
    nodes: Vec<TreeNode>,
    importance: Vec<f64>,
}

impl TreeBuilder<'_> {
    /// Sample `per_split` distinct feature indices (partial Fisher-Yates).
    fn sample_features(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..self.n_features).collect();
        let m = self.per_split.min(self.n_features);
        for i in 0..m {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(m);
        pool
    }

    fn build(&mut self, indices: &[usize], depth: usize, rng: &mut impl Rng) -> usize {
        let mut total = Moments::default();
        for &i in indices {
            total.push(self.y[i]);
        }
        let here = self.nodes.len();
        if depth >= self.max_depth || indices.len() < 2 || total.sse() <= 1e-12 {
            self.nodes.push(TreeNode::Leaf {
                value: total.mean(),
            });
            return here;
        }

        // Candidate features are drawn before evaluating so the stream of
        // random numbers is independent of the data values.
        let candidates = self.sample_features(rng);
        let mut best: Option<(f64, usize, f64)> = None; // (reduction, feature, threshold)
        let mut sorted: Vec<(f64, f64)> = Vec::with_capacity(indices.len());
        for &feat in &candidates {
            sorted.clear();
            sorted.extend(
                indices
                    .iter()
                    .map(|&i| (self.x[i * self.n_features + feat], self.y[i])),
            );
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut left = Moments::default();
            let mut right = total;
            for k in 0..sorted.len() - 1 {
                let (v, t) = sorted[k];
                left.push(t);
                right.n -= 1.0;
                right.sum -= t;
                right.sq -= t * t;
                let next = sorted[k + 1].0;
                if next <= v {
                    continue; // no distinct boundary here
                }
                let reduction = total.sse() - left.sse() - right.sse();
                let threshold = v + (next - v) / 2.0;
                let better = match best {
                    None => true,
                    Some((r, f, th)) => {
                        reduction > r
                            || (reduction == r && (feat < f || (feat == f && threshold < th)))
                    }
                };
                if better && reduction > 1e-12 {
                    best = Some((reduction, feat, threshold));
                }
            }
        }

        let Some((reduction, feature, threshold)) = best else {
            self.nodes.push(TreeNode::Leaf {
                value: total.mean(),
            });
            return here;
        };

        self.importance[feature] += reduction;
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
            .iter()
            .partition(|&&i| self.x[i * self.n_features + feature] <= threshold);
        // Reserve the slot so children land after their parent.
        self.nodes.push(TreeNode::Leaf { value: 0.0 });
        let left = self.build(&left_idx, depth + 1, rng);
        let right = self.build(&right_idx, depth + 1, rng);
        self.nodes[here] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        here
    }
}

/// Fit a bootstrap forest on the row-major `n x f` matrix `x` against `y`.
/// Each tree gets an independent stream derived from `seed`, so results are
/// identical whether trees are fit in parallel or serially.
pub fn fit_forest(
    x: &[f64],
    n: usize,
    f: usize,
    y: &[f64],
    params: &ForestParams,
    seed: u64,
) -> ForestModel {
    assert!(n >= 2, "need at least two samples");
    assert_eq!(x.len(), n * f);
    assert_eq!(y.len(), n);
    assert!(params.n_trees >= 1 && params.max_depth >= 1);
    let per_split = (f as f64).sqrt().ceil() as usize;

    let fitted: Vec<(Tree, Vec<f64>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from(seed, SALT_TREE ^ (t as u64));
            let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut builder = TreeBuilder {
                x,
                y,
                n_features: f,
                max_depth: params.max_depth,
                per_split,
                nodes: Vec::new(),
                importance: vec![0.0; f],
            };
            builder.build(&indices, 0, &mut rng);
            (
                Tree {
                    nodes: builder.nodes,
                },
                builder.importance,
            )
        })
        .collect();

    let mut importances = vec![0.0; f];
    let mut trees = Vec::with_capacity(params.n_trees);
    for (tree, imp) in fitted {
        for (a, b) in importances.iter_mut().zip(imp.iter()) {
            *a += b;
        }
        trees.push(tree);
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        for v in importances.iter_mut() {
            *v /= total;
        }
    }
    ForestModel {
        trees,
        feature_importances: importances,
    }
}
