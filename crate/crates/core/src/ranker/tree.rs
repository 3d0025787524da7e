//! Regression trees grown by exact greedy split search on second-order
//! gradient statistics.

use serde::{Deserialize, Serialize};

use super::RankParams;
use crate::features::N_FEATURES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub feature: usize,
    /// Rows with `x[feature] < threshold` go left.
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub leaf_value: f64,
    pub is_leaf: bool,
    /// Direction for a missing value. Features are never missing; kept
    /// for format compatibility.
    pub default_left: bool,
}

impl Node {
    fn leaf(value: f64) -> Node {
        Node {
            feature: 0,
            threshold: 0.0,
            left: 0,
            right: 0,
            leaf_value: value,
            is_leaf: true,
            default_left: true,
        }
    }
}

/// Nodes in creation order; node 0 is the root and children always have
/// larger indices than their parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn constant(value: f64) -> Tree {
        Tree {
            nodes: vec![Node::leaf(value)],
        }
    }

    pub fn predict(&self, x: &[f64; N_FEATURES]) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            if n.is_leaf {
                return n.leaf_value;
            }
            let v = x[n.feature];
            let go_left = if v.is_nan() { n.default_left } else { v < n.threshold };
            i = if go_left { n.left } else { n.right } as usize;
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.is_leaf {
                0
            } else {
                1 + walk(t, n.left as usize).max(walk(t, n.right as usize))
            }
        }
        walk(self, 0)
    }

    /// Feature indices used by any internal node.
    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter(|n| !n.is_leaf).map(|n| n.feature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    pub grad_left: f64,
    pub hess_left: f64,
}

/// `1/2 [GL^2/(HL+l) + GR^2/(HR+l) - G^2/(H+l)]`
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr))
}

/// Threshold strictly above `lo` and at most `hi`, so `x < t` separates
/// them.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo && mid <= hi {
        mid
    } else {
        hi
    }
}

/// Scan one feature's `(value, g, h)` triples in ascending value order and
/// improve `best` with any strictly better split.
fn scan_feature(
    feature: usize,
    items: impl Iterator<Item = (f64, f64, f64)>,
    total_g: f64,
    total_h: f64,
    params: &RankParams,
    best: &mut Option<Split>,
) {
    let (mut gl, mut hl) = (0.0, 0.0);
    let mut prev: Option<f64> = None;
    for (v, g, h) in items {
        if let Some(p) = prev {
            if v > p {
                let (gr, hr) = (total_g - gl, total_h - hl);
                if hl >= params.min_child_weight && hr >= params.min_child_weight {
                    let gain = split_gain(gl, hl, gr, hr, params.l2_lambda);
                    if gain > 0.0 && best.map_or(true, |b| gain > b.gain) {
                        *best = Some(Split {
                            feature,
                            threshold: midpoint(p, v),
                            gain,
                            grad_left: gl,
                            hess_left: hl,
                        });
                    }
                }
            }
        }
        gl += g;
        hl += h;
        prev = Some(v);
    }
}

/// Best split of the rows in `rows`, or `None` when no split has positive
/// gain. Ties keep the lowest feature, then the lowest threshold.
#[allow(clippy::needless_range_loop)]
pub fn find_best_split(
    x: &[[f64; N_FEATURES]],
    grad: &[f64],
    hess: &[f64],
    rows: &[usize],
    params: &RankParams,
) -> Option<Split> {
    let total_g: f64 = rows.iter().map(|&i| grad[i]).sum();
    let total_h: f64 = rows.iter().map(|&i| hess[i]).sum();
    let mut best = None;
    let mut order = rows.to_vec();
    for f in 0..N_FEATURES {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let items = order.iter().map(|&i| (x[i][f], grad[i], hess[i]));
        scan_feature(f, items, total_g, total_h, params, &mut best);
    }
    best
}

/// Row indices sorted by each feature, computed once per training run.
pub(crate) fn presort(x: &[[f64; N_FEATURES]]) -> Vec<Vec<usize>> {
    (0..N_FEATURES)
        .map(|f| {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Grow one tree level by level. Leaf values are the shrunken Newton step
/// `-lr * G / (H + lambda)`.
pub(crate) fn build_tree(
    x: &[[f64; N_FEATURES]],
    grad: &[f64],
    hess: &[f64],
    sorted: &[Vec<usize>],
    params: &RankParams,
) -> Tree {
    let n = x.len();
    let mut node_of = vec![0u32; n];
    let mut nodes = vec![Node::leaf(0.0)];
    let total_g: f64 = grad.iter().sum();
    let total_h: f64 = hess.iter().sum();
    let mut frontier = vec![(0u32, total_g, total_h)];
    let leaf_value = |g: f64, h: f64| -params.learning_rate * g / (h + params.l2_lambda);

    for depth in 0..=params.max_depth {
        let mut next = Vec::new();
        for (id, g, h) in frontier {
            let split = if depth < params.max_depth {
                let mut best = None;
                for (f, order) in sorted.iter().enumerate() {
                    let items = order
                        .iter()
                        .filter(|&&i| node_of[i] == id)
                        .map(|&i| (x[i][f], grad[i], hess[i]));
                    scan_feature(f, items, g, h, params, &mut best);
                }
                best
            } else {
                None
            };
            let Some(s) = split else {
                nodes[id as usize].leaf_value = leaf_value(g, h);
                continue;
            };
            let left = nodes.len() as u32;
            let right = left + 1;
            nodes.push(Node::leaf(0.0));
            nodes.push(Node::leaf(0.0));
            nodes[id as usize] = Node {
                feature: s.feature,
                threshold: s.threshold,
                left,
                right,
                leaf_value: 0.0,
                is_leaf: false,
                default_left: true,
            };
            for (i, slot) in node_of.iter_mut().enumerate() {
                if *slot == id {
                    *slot = if x[i][s.feature] < s.threshold { left } else { right };
                }
            }
            next.push((left, s.grad_left, s.hess_left));
            next.push((right, g - s.grad_left, h - s.hess_left));
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Tree { nodes }
}
