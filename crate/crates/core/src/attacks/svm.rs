//! CUMUL: one-vs-rest soft-margin SVMs with an RBF kernel, trained by SMO,
//! with (C, gamma) chosen by an inner stratified grid search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{encode_labels, rank_by_confidence, AttackError, Prediction};
use crate::netfeat::{FeatureMatrix, MinMaxBounds};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CumulConfig {
    #[serde(rename = "C_grid", alias = "c_grid")]
    pub c_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub folds_inner: usize,
    pub tolerance: f64,
}

impl Default for CumulConfig {
    fn default() -> Self {
        CumulConfig {
            c_grid: [-5, 0, 5, 10].iter().map(|&e| 2f64.powi(e)).collect(),
            gamma_grid: [-7, -3, 0, 3].iter().map(|&e| 2f64.powi(e)).collect(),
            folds_inner: 3,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoParams {
    pub c: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

/// A solved binary problem over a fixed kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmBinary {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solve the soft-margin dual for labels `y` in {-1,+1} over the row-major
/// `n x n` kernel matrix `k`, using second-order working-set selection.
pub fn smo(k: &[f64], y: &[f64], p: SmoParams) -> SvmBinary {
    let n = y.len();
    debug_assert_eq!(k.len(), n * n);
    let kij = |i: usize, j: usize| k[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let c = p.c;
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < p.max_iter {
        // pick i maximizing -y_t G_t over the "up" set
        let mut gmax = f64::NEG_INFINITY;
        let mut gi = usize::MAX;
        for t in 0..n {
            let up = if y[t] > 0.0 { !upper(alpha[t]) } else { !lower(alpha[t]) };
            if up && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                gi = t;
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut gj = usize::MAX;
        let mut best = f64::INFINITY;
        if gi != usize::MAX {
            for t in 0..n {
                let low = if y[t] > 0.0 { !lower(alpha[t]) } else { !upper(alpha[t]) };
                if !low {
                    continue;
                }
                let v = y[t] * grad[t];
                gmax2 = gmax2.max(v);
                let b = gmax + v;
                if b > 0.0 {
                    let a = kij(gi, gi) + kij(t, t) - 2.0 * kij(gi, t);
                    let obj = -(b * b) / if a > 0.0 { a } else { TAU };
                    if obj <= best {
                        best = obj;
                        gj = t;
                    }
                }
            }
        }
        if gi == usize::MAX || gj == usize::MAX || gmax + gmax2 < p.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let (i, j) = (gi, gj);
        let (ai, aj) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * kij(i, j);
        if y[i] != y[j] {
            let quad = (kij(i, i) + kij(j, j) + 2.0 * qij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (kij(i, i) + kij(j, j) - 2.0 * qij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * kij(i, t) * di + y[j] * kij(j, t) * dj);
        }
    }
    if !converged {
        log::debug!("SMO stopped at the iteration cap ({iterations})");
    }
    SvmBinary { rho: compute_rho(&alpha, &grad, y, c), alpha, iterations, converged }
}

fn compute_rho(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum) = (0usize, 0.0);
    for t in 0..y.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    if free > 0 {
        sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn max_iter(n: usize) -> usize {
    (100 * n).max(100_000)
}

/// Train one-vs-rest machines on the kernel submatrix `idx x idx`.
/// Returns per-class dual coefficients `alpha_i * y_i` and offsets.
fn train_ovr(kfull: &[f64], n_full: usize, idx: &[usize], y: &[usize], n_classes: usize, c: f64, tol: f64) -> Vec<(Vec<f64>, f64)> {
    let n = idx.len();
    let mut k = vec![0.0; n * n];
    for (a, &ia) in idx.iter().enumerate() {
        for (b, &ib) in idx.iter().enumerate() {
            k[a * n + b] = kfull[ia * n_full + ib];
        }
    }
    (0..n_classes)
        .into_par_iter()
        .map(|cls| {
            let yb: Vec<f64> = idx.iter().map(|&i| if y[i] == cls { 1.0 } else { -1.0 }).collect();
            let sol = smo(&k, &yb, SmoParams { c, tolerance: tol, max_iter: max_iter(n) });
            let coef = sol.alpha.iter().zip(&yb).map(|(a, y)| a * y).collect();
            (coef, sol.rho)
        })
        .collect()
}

/// Stratified fold index per row.
fn stratified_folds(y: &[usize], n_classes: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; y.len()];
    for cls in 0..n_classes {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == cls).collect();
        members.shuffle(&mut rng);
        for (pos, i) in members.into_iter().enumerate() {
            out[i] = pos % folds;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub classes: Vec<String>,
    pub bounds: MinMaxBounds,
    pub c: f64,
    pub gamma: f64,
    support: Vec<Vec<f64>>,
    /// `coef[class][sv]`
    coef: Vec<Vec<f64>>,
    rho: Vec<f64>,
}

impl SvmModel {
    pub fn fit(train: &FeatureMatrix, cfg: &CumulConfig, seed: u64) -> Result<Self, AttackError> {
        if cfg.c_grid.is_empty() || cfg.gamma_grid.is_empty() {
            return Err(AttackError::InvalidConfig("empty C or gamma grid".into()));
        }
        if cfg.c_grid.iter().chain(&cfg.gamma_grid).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(AttackError::InvalidConfig("grid values must be positive".into()));
        }
        let (classes, y) = encode_labels(&train.labels);
        if classes.len() < 2 {
            return Err(AttackError::SingleClass);
        }
        let bounds = MinMaxBounds::fit(&train.rows);
        let x: Vec<Vec<f64>> = train.rows.iter().map(|r| bounds.scale(r)).collect();
        let n = x.len();
        let d2: Vec<f64> = (0..n * n).into_par_iter().map(|p| sq_dist(&x[p / n], &x[p % n])).collect();
        let kernel = |g: f64| -> Vec<f64> { d2.par_iter().map(|d| (-g * d).exp()).collect() };

        let min_class = (0..classes.len()).map(|c| y.iter().filter(|&&v| v == c).count()).min().unwrap_or(0);
        let folds = cfg.folds_inner.min(min_class);
        let (c, gamma) = if folds < 2 || cfg.c_grid.len() * cfg.gamma_grid.len() == 1 {
            if folds < 2 {
                log::warn!("too few rows per site for inner cross-validation; using the first grid point");
            }
            (cfg.c_grid[0], cfg.gamma_grid[0])
        } else {
            let assign = stratified_folds(&y, classes.len(), folds, seed);
            // correct[ci][gi]
            let mut correct = vec![vec![0usize; cfg.gamma_grid.len()]; cfg.c_grid.len()];
            for (gi, &g) in cfg.gamma_grid.iter().enumerate() {
                let k = kernel(g);
                for f in 0..folds {
                    let tr: Vec<usize> = (0..n).filter(|&i| assign[i] != f).collect();
                    let te: Vec<usize> = (0..n).filter(|&i| assign[i] == f).collect();
                    let hits: Vec<usize> = cfg
                        .c_grid
                        .par_iter()
                        .map(|&c| {
                            let m = train_ovr(&k, n, &tr, &y, classes.len(), c, cfg.tolerance);
                            te.iter()
                                .filter(|&&t| {
                                    let dec: Vec<f64> = m
                                        .iter()
                                        .map(|(coef, rho)| {
                                            tr.iter().zip(coef).map(|(&s, a)| a * k[s * n + t]).sum::<f64>() - rho
                                        })
                                        .collect();
                                    argmax(&dec) == y[t]
                                })
                                .count()
                        })
                        .collect();
                    for (ci, h) in hits.into_iter().enumerate() {
                        correct[ci][gi] += h;
                    }
                }
            }
            let mut best = (0, 0);
            for ci in 0..cfg.c_grid.len() {
                for gi in 0..cfg.gamma_grid.len() {
                    if correct[ci][gi] > correct[best.0][best.1] {
                        best = (ci, gi);
                    }
                }
            }
            log::debug!("CUMUL grid search: {correct:?}, picked {best:?}");
            (cfg.c_grid[best.0], cfg.gamma_grid[best.1])
        };

        let k = kernel(gamma);
        let all: Vec<usize> = (0..n).collect();
        let m = train_ovr(&k, n, &all, &y, classes.len(), c, cfg.tolerance);
        let keep: Vec<usize> = (0..n).filter(|&i| m.iter().any(|(coef, _)| coef[i] != 0.0)).collect();
        Ok(SvmModel {
            classes,
            bounds,
            c,
            gamma,
            support: keep.iter().map(|&i| x[i].clone()).collect(),
            coef: m.iter().map(|(coef, _)| keep.iter().map(|&i| coef[i]).collect()).collect(),
            rho: m.iter().map(|(_, rho)| *rho).collect(),
        })
    }

    /// Per-class decision values for one unscaled row.
    pub fn decision_values(&self, row: &[f64]) -> Vec<f64> {
        let x = self.bounds.scale(row);
        let kv: Vec<f64> = self.support.iter().map(|s| (-self.gamma * sq_dist(s, &x)).exp()).collect();
        self.coef.iter().zip(&self.rho).map(|(c, rho)| c.iter().zip(&kv).map(|(a, k)| a * k).sum::<f64>() - rho).collect()
    }

    pub fn support_vectors(&self) -> usize {
        self.support.len()
    }

    pub fn predict(&self, test: &FeatureMatrix) -> Result<Vec<Prediction>, AttackError> {
        let width = self.bounds.min.len();
        if !test.is_empty() && test.width() != width {
            return Err(AttackError::WidthMismatch { expected: width, got: test.width() });
        }
        Ok(test
            .rows
            .par_iter()
            .zip(test.labels.par_iter())
            .zip(test.instance_ids.par_iter())
            .map(|((row, label), id)| {
                let conf = softmax(&self.decision_values(row));
                Prediction::from_ranked(id, label, rank_by_confidence(&self.classes, &conf))
            })
            .collect())
    }
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::super::test_util::*;
    use super::*;
    use crate::netfeat::FeatureSet;

    #[test]
    fn softmax_arithmetic() {
        let p = softmax(&[2.0, 0.0, -2.0]);
        let z = 2f64.exp() + 1.0 + (-2f64).exp();
        assert!((p[0] - 2f64.exp() / z).abs() < 1e-12);
        assert!((p[0] - 0.867).abs() < 1e-3 && (p[1] - 0.117).abs() < 1e-3 && (p[2] - 0.016).abs() < 1e-3);
    }

    fn linear_kernel(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n * n).map(|p| x[p / n] * x[p % n]).collect()
    }

    #[test]
    fn hard_margin_on_the_line() {
        // points -2,-1 (negative) and 1,3 (positive), large C: the maximum
        // margin separator is x = 0 with |w| = 1, so f(x) = x.
        let x = [-2.0, -1.0, 1.0, 3.0];
        let y = [-1.0, -1.0, 1.0, 1.0];
        let sol = smo(&linear_kernel(&x), &y, SmoParams { c: 1e6, tolerance: 1e-9, max_iter: 10_000 });
        assert!(sol.converged);
        let w: f64 = sol.alpha.iter().zip(&y).zip(&x).map(|((a, y), x)| a * y * x).sum();
        assert!((w - 1.0).abs() < 1e-6, "w = {w}");
        assert!(sol.rho.abs() < 1e-6, "rho = {}", sol.rho);
        // only the two margin points are support vectors
        assert!(sol.alpha[0].abs() < 1e-9 && sol.alpha[3].abs() < 1e-9);
    }

    #[test]
    fn kkt_conditions_hold() {
        let train = blobs(FeatureSet::Cumul, &[vec![0.0, 0.0], vec![1.0, 1.0]], 1.6, 15, 8);
        let n = train.len();
        let g = 0.5;
        let k: Vec<f64> = (0..n * n).map(|p| (-g * sq_dist(&train.rows[p / n], &train.rows[p % n])).exp()).collect();
        let y: Vec<f64> = train.labels.iter().map(|l| if l == "site0" { 1.0 } else { -1.0 }).collect();
        let c = 2.0;
        let sol = smo(&k, &y, SmoParams { c, tolerance: 1e-3, max_iter: 100_000 });
        assert!(sol.converged);
        let sum: f64 = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
        assert!(sum.abs() < 1e-9);
        for i in 0..n {
            let f: f64 = (0..n).map(|j| sol.alpha[j] * y[j] * k[i * n + j]).sum::<f64>() - sol.rho;
            let m = y[i] * f;
            let a = sol.alpha[i];
            assert!((0.0..=c).contains(&a));
            if a <= 0.0 {
                assert!(m >= 1.0 - 2e-3, "row {i}: margin {m} with alpha 0");
            } else if a >= c {
                assert!(m <= 1.0 + 2e-3, "row {i}: margin {m} at bound");
            } else {
                assert!((m - 1.0).abs() < 2e-3, "row {i}: free margin {m}");
            }
        }
    }

    #[test]
    fn separable_sites_perfect() {
        let train = blobs(FeatureSet::Cumul, &[vec![0.0], vec![1.0]], 0.2, 12, 1);
        let test = blobs(FeatureSet::Cumul, &[vec![0.0], vec![1.0]], 0.2, 6, 2);
        let m = SvmModel::fit(&train, &CumulConfig::default(), 5).unwrap();
        let preds = m.predict(&test).unwrap();
        assert_eq!(accuracy(&preds), 1.0);
        assert_distribution(&preds);
    }

    #[test]
    fn three_site_training_accuracy() {
        let c = [vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let train = blobs(FeatureSet::Cumul, &c, 0.3, 9, 3);
        let m = SvmModel::fit(&train, &CumulConfig::default(), 5).unwrap();
        assert_eq!(accuracy(&m.predict(&train).unwrap()), 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let train = blobs(FeatureSet::Cumul, &[vec![0.0]], 0.2, 5, 1);
        assert!(matches!(SvmModel::fit(&train, &CumulConfig::default(), 0), Err(AttackError::SingleClass)));
    }
}
