//! k-FP in its closed-world form: a random forest whose trees vote for sites.

use serde::{Deserialize, Serialize};

use super::{encode_labels, rank_by_confidence, AttackError, Prediction};
use crate::forest::{ForestClassifier, ForestParams, MaxFeatures, TreeParams};
use crate::netfeat::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KfpConfig {
    pub trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
}

impl Default for KfpConfig {
    fn default() -> Self {
        KfpConfig { trees: 100, max_depth: None, min_leaf: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfpModel {
    pub classes: Vec<String>,
    pub forest: ForestClassifier,
}

impl KfpModel {
    /// Returns the model and any warnings about the training data.
    pub fn fit(train: &FeatureMatrix, cfg: &KfpConfig, seed: u64) -> Result<(Self, Vec<String>), AttackError> {
        if cfg.trees < 1 {
            return Err(AttackError::InvalidConfig("k-FP needs at least one tree".into()));
        }
        if cfg.min_leaf < 1 {
            return Err(AttackError::InvalidConfig("min_leaf must be at least 1".into()));
        }
        let (classes, y) = encode_labels(&train.labels);
        let mut counts = vec![0usize; classes.len()];
        for &c in &y {
            counts[c] += 1;
        }
        let warnings = classes
            .iter()
            .zip(&counts)
            .filter(|(_, &n)| n == 1)
            .map(|(s, _)| format!("site {s} has a single training row"))
            .collect::<Vec<_>>();
        for w in &warnings {
            log::warn!("{w}");
        }
        let params = ForestParams {
            trees: cfg.trees,
            tree: TreeParams { max_depth: cfg.max_depth, min_leaf: cfg.min_leaf, max_features: MaxFeatures::Sqrt },
            bootstrap: true,
            seed,
        };
        let forest = ForestClassifier::fit(&train.rows, &y, classes.len(), &params);
        Ok((KfpModel { classes, forest }, warnings))
    }

    pub fn predict(&self, test: &FeatureMatrix) -> Result<Vec<Prediction>, AttackError> {
        let n = self.forest.trees.len() as f64;
        Ok(test
            .rows
            .iter()
            .zip(&test.labels)
            .zip(&test.instance_ids)
            .map(|((row, label), id)| {
                let conf: Vec<f64> = self.forest.votes(row).into_iter().map(|v| v as f64 / n).collect();
                Prediction::from_ranked(id, label, rank_by_confidence(&self.classes, &conf))
            })
            .collect())
    }
}
