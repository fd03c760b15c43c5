//! Wang-style k-NN: weighted L1 distance, weights tuned so that instances of
//! the same site sit closer together than instances of different sites.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode_labels, AttackError, Prediction};
use crate::netfeat::FeatureMatrix;

pub const WEIGHT_DECAY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
    /// Passes of weight learning over the training set; 0 keeps uniform weights.
    pub rounds: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 3, rounds: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub weights: Vec<f64>,
    pub classes: Vec<String>,
    rows: Vec<Vec<f64>>,
    y: Vec<usize>,
}

pub fn weighted_l1(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * (a - b).abs()).sum()
}

/// Indices of the `k` smallest entries of `dist` among `candidates`,
/// ordered by (distance, index).
fn k_smallest(dist: &[f64], candidates: impl Iterator<Item = usize>, k: usize) -> Vec<usize> {
    let mut c: Vec<usize> = candidates.collect();
    let cmp = |a: &usize, b: &usize| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b));
    if c.len() > k {
        c.select_nth_unstable_by(k, cmp);
        c.truncate(k);
    }
    c.sort_by(cmp);
    c
}

/// Learn feature weights. Each point, visited in seeded-random order, pulls
/// down the weight of every feature that separates it from its own site more
/// than from its nearest rivals.
pub fn learn_weights(rows: &[Vec<f64>], y: &[usize], k: usize, rounds: usize, seed: u64) -> Vec<f64> {
    let width = rows.first().map_or(0, Vec::len);
    let mut w = vec![1.0; width];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut dist = vec![0.0; n];
    for _ in 0..rounds {
        order.shuffle(&mut rng);
        for &i in &order {
            for j in 0..n {
                dist[j] = if j == i { 0.0 } else { weighted_l1(&w, &rows[i], &rows[j]) };
            }
            let same = k_smallest(&dist, (0..n).filter(|&j| j != i && y[j] == y[i]), k);
            let diff = k_smallest(&dist, (0..n).filter(|&j| y[j] != y[i]), k);
            if same.is_empty() || diff.is_empty() {
                continue;
            }
            for f in 0..width {
                if w[f] == 0.0 {
                    continue;
                }
                let s: f64 = same.iter().map(|&j| (rows[i][f] - rows[j][f]).abs()).sum();
                let d: f64 = diff.iter().map(|&j| (rows[i][f] - rows[j][f]).abs()).sum();
                if s > d {
                    w[f] *= WEIGHT_DECAY;
                }
            }
        }
    }
    w
}

impl KnnModel {
    pub fn fit(train: &FeatureMatrix, cfg: &KnnConfig, seed: u64) -> Result<Self, AttackError> {
        if cfg.k == 0 {
            return Err(AttackError::InvalidConfig("k must be at least 1".into()));
        }
        if cfg.k > train.len() {
            return Err(AttackError::KTooLarge { k: cfg.k, rows: train.len() });
        }
        let (classes, y) = encode_labels(&train.labels);
        let weights = learn_weights(&train.rows, &y, cfg.k, cfg.rounds, seed);
        Ok(KnnModel { k: cfg.k, weights, classes, rows: train.rows.clone(), y })
    }

    pub fn predict(&self, test: &FeatureMatrix) -> Result<Vec<Prediction>, AttackError> {
        if test.width() != self.weights.len() && !test.is_empty() {
            return Err(AttackError::WidthMismatch { expected: self.weights.len(), got: test.width() });
        }
        use rayon::prelude::*;
        Ok(test
            .rows
            .par_iter()
            .zip(test.labels.par_iter())
            .zip(test.instance_ids.par_iter())
            .map(|((row, label), id)| self.predict_one(row, label, id))
            .collect())
    }

    fn predict_one(&self, row: &[f64], true_site: &str, id: &str) -> Prediction {
        let dist: Vec<f64> = self.rows.iter().map(|r| weighted_l1(&self.weights, row, r)).collect();
        let all = k_smallest(&dist, 0..dist.len(), dist.len());
        let nearest = &all[..self.k];
        // class -> (votes, summed distance)
        let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for &j in nearest {
            let e = tally.entry(self.y[j]).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += dist[j];
        }
        let mut voted: Vec<(usize, usize, f64)> = tally.into_iter().map(|(c, (v, s))| (c, v, s)).collect();
        voted.sort_by(|a, b| {
            b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then_with(|| self.classes[a.0].cmp(&self.classes[b.0]))
        });
        let mut ranked: Vec<(String, f64)> =
            voted.iter().map(|&(c, v, _)| (self.classes[c].clone(), v as f64 / self.k as f64)).collect();
        let mut used: Vec<usize> = voted.iter().map(|v| v.0).collect();
        if voted.len() == 1 {
            if let Some(&j) = all.iter().find(|&&j| self.y[j] != voted[0].0) {
                ranked.push((self.classes[self.y[j]].clone(), 0.0));
                used.push(self.y[j]);
            }
        }
        for (c, name) in self.classes.iter().enumerate() {
            if !used.contains(&c) {
                ranked.push((name.clone(), 0.0));
            }
        }
        let mut p = Prediction::from_ranked(id, true_site, ranked);
        p.nearest_distance = Some(dist[all[0]]);
        p
    }
}
