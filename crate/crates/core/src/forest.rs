//! CART trees and bagged random forests, for classification (Gini impurity)
//! and regression (variance reduction).
//!
//! Splits are `x <= threshold` with the threshold halfway between the two
//! neighboring training values, so the chosen split depends only on the
//! ordering of each feature's values.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How many candidate features each split examines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    Third,
    All,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, width: usize) -> usize {
        let n = match self {
            MaxFeatures::Sqrt => (width as f64).sqrt().round() as usize,
            MaxFeatures::Third => width / 3,
            MaxFeatures::All => width,
            MaxFeatures::Count(n) => n,
        };
        n.clamp(1, width.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub max_features: MaxFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// A fitted tree. Classification leaves hold the winning class index as a
/// float; regression leaves hold the mean target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split { feature, threshold, left, right } => {
                    i = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn rec(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + rec(nodes, *left).max(rec(nodes, *right)),
            }
        }
        rec(&self.nodes, 0)
    }
}

#[derive(Clone, Copy)]
enum Targets<'a> {
    Classes { y: &'a [usize], n_classes: usize },
    Values(&'a [f64]),
}

impl Targets<'_> {
    /// Sample-weighted impurity of a node: n * gini, or the sum of squared errors.
    fn impurity(&self, idx: &[usize]) -> f64 {
        match *self {
            Targets::Classes { y, n_classes } => {
                let mut counts = vec![0usize; n_classes];
                for &i in idx {
                    counts[y[i]] += 1;
                }
                weighted_gini(&counts, idx.len())
            }
            Targets::Values(y) => {
                let n = idx.len() as f64;
                let s: f64 = idx.iter().map(|&i| y[i]).sum();
                let ss: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
                (ss - s * s / n).max(0.0)
            }
        }
    }

    fn leaf_value(&self, idx: &[usize]) -> f64 {
        match *self {
            Targets::Classes { y, n_classes } => {
                let mut counts = vec![0usize; n_classes];
                for &i in idx {
                    counts[y[i]] += 1;
                }
                // first maximum: smallest class index wins ties
                let mut best = 0;
                for (c, &n) in counts.iter().enumerate() {
                    if n > counts[best] {
                        best = c;
                    }
                }
                best as f64
            }
            Targets::Values(y) => idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64,
        }
    }
}

fn weighted_gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let sq: f64 = counts.iter().map(|&c| (c as f64) * (c as f64)).sum();
    n - sq / n
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

/// Best split of `idx` on `feature`, honoring `min_leaf`.
fn best_split_on(x: &[Vec<f64>], t: Targets, idx: &[usize], feature: usize, min_leaf: usize, parent: f64) -> Option<Split> {
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| x[a][feature].total_cmp(&x[b][feature]).then(a.cmp(&b)));
    let n = order.len();
    let mut best: Option<(f64, usize)> = None;
    match t {
        Targets::Classes { y, n_classes } => {
            let mut left = vec![0usize; n_classes];
            let mut right = vec![0usize; n_classes];
            for &i in &order {
                right[y[i]] += 1;
            }
            for k in 0..n - 1 {
                let c = y[order[k]];
                left[c] += 1;
                right[c] -= 1;
                if x[order[k]][feature] == x[order[k + 1]][feature] {
                    continue;
                }
                let (nl, nr) = (k + 1, n - k - 1);
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let gain = parent - weighted_gini(&left, nl) - weighted_gini(&right, nr);
                if best.is_none_or(|(g, _)| gain > g) {
                    best = Some((gain, k));
                }
            }
        }
        Targets::Values(y) => {
            let total: f64 = order.iter().map(|&i| y[i]).sum();
            let total_sq: f64 = order.iter().map(|&i| y[i] * y[i]).sum();
            let (mut s, mut ss) = (0.0, 0.0);
            for k in 0..n - 1 {
                let v = y[order[k]];
                s += v;
                ss += v * v;
                if x[order[k]][feature] == x[order[k + 1]][feature] {
                    continue;
                }
                let (nl, nr) = ((k + 1) as f64, (n - k - 1) as f64);
                if (k + 1) < min_leaf || (n - k - 1) < min_leaf {
                    continue;
                }
                let sse_l = (ss - s * s / nl).max(0.0);
                let (sr, ssr) = (total - s, total_sq - ss);
                let sse_r = (ssr - sr * sr / nr).max(0.0);
                let gain = parent - sse_l - sse_r;
                if best.is_none_or(|(g, _)| gain > g) {
                    best = Some((gain, k));
                }
            }
        }
    }
    let (gain, k) = best?;
    Some(Split {
        feature,
        threshold: midpoint(x[order[k]][feature], x[order[k + 1]][feature]),
        gain,
        left: order[..=k].to_vec(),
        right: order[k + 1..].to_vec(),
    })
}

/// Halfway between `a < b`, falling back to `a` when they are adjacent floats.
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b {
        m
    } else {
        a
    }
}

/// Minimum impurity decrease for a split to be kept.
const MIN_GAIN: f64 = 1e-12;

fn grow(
    x: &[Vec<f64>],
    t: Targets,
    idx: Vec<usize>,
    params: &TreeParams,
    rng: &mut ChaCha8Rng,
    importance: &mut [f64],
) -> Tree {
    let width = x.first().map_or(0, Vec::len);
    let mtry = params.max_features.resolve(width);
    let mut nodes = Vec::new();
    // (node slot, samples, depth)
    let mut stack = vec![(0usize, idx, 0usize)];
    nodes.push(Node::Leaf(0.0));
    while let Some((slot, idx, depth)) = stack.pop() {
        let parent = t.impurity(&idx);
        let can_split = parent > MIN_GAIN
            && idx.len() >= 2 * params.min_leaf.max(1)
            && params.max_depth.is_none_or(|d| depth < d);
        let mut best: Option<Split> = None;
        if can_split && width > 0 {
            let mut feats: Vec<usize> = sample(rng, width, mtry).into_vec();
            feats.sort_unstable();
            for f in feats {
                if let Some(s) = best_split_on(x, t, &idx, f, params.min_leaf.max(1), parent) {
                    if s.gain > MIN_GAIN && best.as_ref().is_none_or(|b| s.gain > b.gain) {
                        best = Some(s);
                    }
                }
            }
        }
        match best {
            None => nodes[slot] = Node::Leaf(t.leaf_value(&idx)),
            Some(s) => {
                importance[s.feature] += s.gain;
                let (l, r) = (nodes.len(), nodes.len() + 1);
                nodes.push(Node::Leaf(0.0));
                nodes.push(Node::Leaf(0.0));
                nodes[slot] = Node::Split { feature: s.feature, threshold: s.threshold, left: l, right: r };
                stack.push((r, s.right, depth + 1));
                stack.push((l, s.left, depth + 1));
            }
        }
    }
    Tree { nodes }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub tree: TreeParams,
    pub bootstrap: bool,
    pub seed: u64,
}

struct FittedTree {
    tree: Tree,
    importance: Vec<f64>,
    in_bag: Vec<bool>,
}

fn fit_trees(x: &[Vec<f64>], t: Targets, params: &ForestParams) -> Vec<FittedTree> {
    let n = x.len();
    let width = x.first().map_or(0, Vec::len);
    let mut master = ChaCha8Rng::seed_from_u64(params.seed);
    let seeds: Vec<u64> = (0..params.trees).map(|_| master.random()).collect();
    seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut in_bag = vec![false; n];
            let idx: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            for &i in &idx {
                in_bag[i] = true;
            }
            let mut importance = vec![0.0; width];
            let tree = grow(x, t, idx, &params.tree, &mut rng, &mut importance);
            FittedTree { tree, importance, in_bag }
        })
        .collect()
}

/// Normalize raw impurity decreases to sum to 1. A forest without any split
/// spreads importance uniformly.
fn normalize_importance(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.into_iter().map(|v| v / total).collect()
    } else {
        let n = raw.len().max(1) as f64;
        raw.into_iter().map(|_| 1.0 / n).collect()
    }
}

fn sum_importance(fitted: &[FittedTree], width: usize) -> Vec<f64> {
    let mut raw = vec![0.0; width];
    for f in fitted {
        for (r, v) in raw.iter_mut().zip(&f.importance) {
            *r += v;
        }
    }
    raw
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestClassifier {
    pub n_classes: usize,
    pub trees: Vec<Tree>,
    pub importance: Vec<f64>,
}

impl ForestClassifier {
    /// `y` holds class indices below `n_classes`.
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, params: &ForestParams) -> Self {
        assert_eq!(x.len(), y.len());
        let width = x.first().map_or(0, Vec::len);
        let fitted = fit_trees(x, Targets::Classes { y, n_classes }, params);
        let importance = normalize_importance(sum_importance(&fitted, width));
        ForestClassifier { n_classes, trees: fitted.into_iter().map(|f| f.tree).collect(), importance }
    }

    /// Number of trees voting for each class.
    pub fn votes(&self, row: &[f64]) -> Vec<usize> {
        let mut v = vec![0; self.n_classes];
        for t in &self.trees {
            v[t.predict(row) as usize] += 1;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestRegressor {
    pub trees: Vec<Tree>,
    pub importance: Vec<f64>,
    /// Out-of-bag prediction per training row; `None` when every tree saw the row.
    pub oob: Vec<Option<f64>>,
}

impl ForestRegressor {
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: &ForestParams) -> Self {
        assert_eq!(x.len(), y.len());
        let width = x.first().map_or(0, Vec::len);
        let fitted = fit_trees(x, Targets::Values(y), params);
        let importance = normalize_importance(sum_importance(&fitted, width));
        let oob = (0..x.len())
            .map(|i| {
                let preds: Vec<f64> = fitted.iter().filter(|f| !f.in_bag[i]).map(|f| f.tree.predict(&x[i])).collect();
                (!preds.is_empty()).then(|| preds.iter().sum::<f64>() / preds.len() as f64)
            })
            .collect();
        ForestRegressor { trees: fitted.into_iter().map(|f| f.tree).collect(), importance, oob }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(trees: usize, depth: Option<usize>, mf: MaxFeatures) -> ForestParams {
        ForestParams {
            trees,
            tree: TreeParams { max_depth: depth, min_leaf: 1, max_features: mf },
            bootstrap: true,
            seed: 7,
        }
    }

    /// Exhaustive threshold search over one feature, independent of the
    /// sweep in `best_split_on`.
    fn brute_force_best_threshold(xs: &[f64], ys: &[usize]) -> (f64, f64) {
        let mut best = (f64::INFINITY, f64::NAN);
        let mut cands: Vec<f64> = xs.to_vec();
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        for &thr in &cands[..cands.len() - 1] {
            let gini = |side: Vec<usize>| {
                let n = side.len() as f64;
                let k = side.iter().filter(|&&c| c == 1).count() as f64;
                n * (1.0 - (k / n).powi(2) - ((n - k) / n).powi(2))
            };
            let l: Vec<usize> = xs.iter().zip(ys).filter(|(x, _)| **x <= thr).map(|(_, y)| *y).collect();
            let r: Vec<usize> = xs.iter().zip(ys).filter(|(x, _)| **x > thr).map(|(_, y)| *y).collect();
            let imp = gini(l) + gini(r);
            if imp < best.0 {
                best = (imp, thr);
            }
        }
        best
    }

    #[test]
    fn pure_split_matches_exhaustive_search() {
        let xs = [0.1, 0.4, 0.2, 3.0, 2.5, 0.3, 2.2, 2.9];
        let ys = [0, 0, 0, 1, 1, 0, 1, 1];
        let (imp, thr) = brute_force_best_threshold(&xs, &ys);
        assert_eq!(imp, 0.0);
        let x: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
        let idx: Vec<usize> = (0..xs.len()).collect();
        let t = Targets::Classes { y: &ys, n_classes: 2 };
        let s = best_split_on(&x, t, &idx, 0, 1, t.impurity(&idx)).unwrap();
        assert!(xs.iter().all(|&v| (v <= thr) == (v <= s.threshold)));

        let f = ForestClassifier::fit(&x, &ys, 2, &params(10, Some(1), MaxFeatures::All));
        for (row, &y) in x.iter().zip(&ys) {
            let v = f.votes(row);
            assert_eq!(v[y], 10, "row {row:?}");
        }
        assert!(f.trees.iter().all(|t| t.depth() <= 1));
    }

    #[test]
    fn min_leaf_respected() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let y = [0, 1, 1, 1, 1, 1];
        let mut p = params(1, None, MaxFeatures::All);
        p.bootstrap = false;
        p.tree.min_leaf = 2;
        let f = ForestClassifier::fit(&x, &y, 2, &p);
        // the only pure cut leaves a single sample on the left
        assert!(f.trees[0].nodes.iter().all(|n| !matches!(n, Node::Split { threshold, .. } if *threshold < 1.0)));
    }

    #[test]
    fn regression_importance_follows_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y: Vec<f64> = x.iter().map(|r| 10.0 * r[1]).collect();
        let f = ForestRegressor::fit(&x, &y, &params(50, Some(6), MaxFeatures::All));
        assert!((f.importance.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(f.importance[1] > 0.9, "{:?}", f.importance);
        assert!(f.oob.iter().filter(|o| o.is_some()).count() > 150);
        assert!((f.predict(&[0.5, 0.5, 0.5]) - 5.0).abs() < 1.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i * 7 % 11) as f64, (i % 3) as f64]).collect();
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let p = params(20, None, MaxFeatures::Sqrt);
        assert_eq!(ForestClassifier::fit(&x, &y, 3, &p), ForestClassifier::fit(&x, &y, 3, &p));
    }

    #[test]
    fn max_features_resolution() {
        assert_eq!(MaxFeatures::Sqrt.resolve(24), 5);
        assert_eq!(MaxFeatures::Third.resolve(2), 1);
        assert_eq!(MaxFeatures::Count(100).resolve(10), 10);
    }
}
