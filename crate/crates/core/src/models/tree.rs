//! CART decision trees with gini impurity.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, ModelError};

/// `1 - p0^2 - p1^2` for a node holding `positives` of `total` samples.
#[inline]
pub fn gini_from_counts(positives: usize, total: usize) -> f64 {
    let p1 = positives as f64 / total as f64;
    let p0 = (total - positives) as f64 / total as f64;
    1.0 - p0 * p0 - p1 * p1
}

pub fn gini_impurity(labels: &[u8]) -> Result<f64, ModelError> {
    if labels.is_empty() {
        return Err(ModelError::Empty);
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    Ok(gini_from_counts(positives, labels.len()))
}

/// Weighted impurity decrease of splitting `total` samples (`positives`
/// of them positive) into a left child of `left` samples (`left_pos`
/// positive) and the remainder.
#[inline]
fn split_decrease(total: usize, positives: usize, left: usize, left_pos: usize) -> f64 {
    let right = total - left;
    let right_pos = positives - left_pos;
    let n = total as f64;
    gini_from_counts(positives, total)
        - (left as f64 / n) * gini_from_counts(left_pos, left)
        - (right as f64 / n) * gini_from_counts(right_pos, right)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    /// Samples with `value <= threshold` go left.
    pub threshold: f64,
    pub decrease: f64,
}

/// Midpoint between consecutive distinct values, kept strictly below `hi`.
#[inline]
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = (lo + hi) / 2.0;
    if m < hi {
        m
    } else {
        lo
    }
}

/// Best gini split of `rows` over `features`, trying thresholds at midpoints
/// of consecutive distinct values. Ties go to the lowest feature index,
/// then the lowest threshold. `None` if nothing decreases impurity while
/// leaving at least `min_samples_leaf` samples on each side.
pub fn find_best_split(
    x: &Matrix,
    y: &[u8],
    rows: &[usize],
    features: &[usize],
    min_samples_leaf: usize,
) -> Option<Split> {
    let mut buf = Vec::with_capacity(rows.len());
    let mut sorted = features.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    best_split_with(x, y, rows, &sorted, min_samples_leaf, &mut buf)
}

fn best_split_with(
    x: &Matrix,
    y: &[u8],
    rows: &[usize],
    sorted_features: &[usize],
    min_samples_leaf: usize,
    buf: &mut Vec<(f64, u8)>,
) -> Option<Split> {
    let total = rows.len();
    if total < 2 {
        return None;
    }
    let positives = rows.iter().filter(|&&r| y[r] == 1).count();
    if positives == 0 || positives == total {
        return None;
    }
    let min_leaf = min_samples_leaf.max(1);
    let mut best: Option<Split> = None;
    for &f in sorted_features {
        let column = x.column(f);
        buf.clear();
        buf.extend(rows.iter().map(|&r| (column[r], y[r])));
        buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_pos = 0usize;
        for i in 0..total - 1 {
            left_pos += buf[i].1 as usize;
            let left = i + 1;
            if buf[i].0 == buf[i + 1].0 || left < min_leaf || total - left < min_leaf {
                continue;
            }
            let decrease = split_decrease(total, positives, left, left_pos);
            if decrease > 0.0 && best.is_none_or(|b| decrease > b.decrease) {
                best = Some(Split {
                    feature: f,
                    threshold: midpoint(buf[i].0, buf[i + 1].0),
                    decrease,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
    /// Candidate features drawn per node; `None` or `>= n_features` uses all.
    pub features_per_split: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Fraction of positive training samples that reached the leaf.
        value: f64,
        samples: usize,
    },
}

/// Flat node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    /// Grows a tree on `rows` (duplicates allowed, as in bootstrap samples).
    pub fn fit<R: Rng>(
        x: &Matrix,
        y: &[u8],
        mut rows: Vec<usize>,
        params: &TreeParams,
        rng: &mut R,
    ) -> Self {
        let mut builder = Builder {
            x,
            y,
            params,
            nodes: Vec::new(),
            buf: Vec::with_capacity(rows.len()),
        };
        builder.grow(&mut rows, 0, rng);
        DecisionTree { nodes: builder.nodes }
    }

    pub fn leaf_value(&self, features: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if features[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { value, .. } => return *value,
            }
        }
    }

    /// Depth of the deepest leaf (root alone = 0).
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn validate(&self, n_features: usize) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree without nodes".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if *feature >= n_features {
                        return Err(format!("node {i}: feature {feature} >= {n_features}"));
                    }
                    if !threshold.is_finite() {
                        return Err(format!("node {i}: non-finite threshold"));
                    }
                    if *left <= i || *right <= i || *left >= self.nodes.len() || *right >= self.nodes.len() {
                        return Err(format!("node {i}: bad child index"));
                    }
                }
                Node::Leaf { value, .. } => {
                    if !(0.0..=1.0).contains(value) {
                        return Err(format!("node {i}: leaf value {value} outside [0, 1]"));
                    }
                }
            }
        }
        Ok(())
    }
}

struct Builder<'a> {
    x: &'a Matrix,
    y: &'a [u8],
    params: &'a TreeParams,
    nodes: Vec<Node>,
    buf: Vec<(f64, u8)>,
}

impl Builder<'_> {
    fn grow<R: Rng>(&mut self, rows: &mut [usize], depth: usize, rng: &mut R) -> usize {
        let n = rows.len();
        let positives = rows.iter().filter(|&&r| self.y[r] == 1).count();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: positives as f64 / n as f64,
            samples: n,
        });
        let p = self.params;
        if depth >= p.max_depth
            || n < p.min_samples_split.max(2)
            || n < 2 * p.min_samples_leaf.max(1)
            || positives == 0
            || positives == n
        {
            return id;
        }
        let n_features = self.x.n_cols();
        let candidates: Vec<usize> = match p.features_per_split {
            Some(k) if k < n_features => {
                let mut v = index::sample(rng, n_features, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n_features).collect(),
        };
        let Some(split) = best_split_with(self.x, self.y, rows, &candidates, p.min_samples_leaf, &mut self.buf)
        else {
            return id;
        };
        let column = self.x.column(split.feature);
        let mut boundary = 0;
        for i in 0..n {
            if column[rows[i]] <= split.threshold {
                rows.swap(i, boundary);
                boundary += 1;
            }
        }
        let (left_rows, right_rows) = rows.split_at_mut(boundary);
        let left = self.grow(left_rows, depth + 1, rng);
        let right = self.grow(right_rows, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}
