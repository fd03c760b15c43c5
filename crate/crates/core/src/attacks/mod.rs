//! The three website-fingerprinting classifiers behind one fit/predict
//! contract. Every prediction carries a full confidence distribution over the
//! training sites so the ensemble can compare classifiers on one scale.

mod kfp;
mod knn;
mod svm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::netfeat::{FeatureMatrix, FeatureSet};

pub use kfp::{KfpConfig, KfpModel};
pub use knn::{KnnConfig, KnnModel};
pub use svm::{softmax, CumulConfig, SmoParams, SvmBinary, SvmModel};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("feature set mismatch: model expects {expected}, got {got}")]
    FeatureSetMismatch { expected: FeatureSet, got: FeatureSet },
    #[error("k = {k} exceeds the {rows} training rows")]
    KTooLarge { k: usize, rows: usize },
    #[error("training set has a single class")]
    SingleClass,
    #[error("training set is empty")]
    EmptyTraining,
    #[error("non-finite feature value in row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("feature width mismatch: model expects {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
    #[error("unknown classifier {0:?}")]
    UnknownClassifier(String),
    #[error("model serialization: {0}")]
    Serialization(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClassifierId {
    Knn,
    Cumul,
    Kfp,
}

impl ClassifierId {
    pub const ALL: [ClassifierId; 3] = [ClassifierId::Knn, ClassifierId::Cumul, ClassifierId::Kfp];

    pub fn featureset(self) -> FeatureSet {
        match self {
            ClassifierId::Knn => FeatureSet::Knn,
            ClassifierId::Cumul => FeatureSet::Cumul,
            ClassifierId::Kfp => FeatureSet::Kfp,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierId::Knn => "KNN",
            ClassifierId::Cumul => "CUMUL",
            ClassifierId::Kfp => "KFP",
        }
    }
}

impl fmt::Display for ClassifierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierId {
    type Err = AttackError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "KNN" => Ok(ClassifierId::Knn),
            "CUMUL" => Ok(ClassifierId::Cumul),
            "KFP" => Ok(ClassifierId::Kfp),
            _ => Err(AttackError::UnknownClassifier(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLabel {
    /// `None` pads the list in single-class worlds.
    pub site: Option<String>,
    pub confidence: f64,
}

/// One classified instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub true_site: String,
    /// Every training site, most confident first; at least two entries.
    pub ranked: Vec<RankedLabel>,
    /// kNN only: distance to the nearest training neighbor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nearest_distance: Option<f64>,
}

impl Prediction {
    /// Build from labels already in rank order, padding to two entries.
    pub fn from_ranked(instance_id: &str, true_site: &str, ranked: Vec<(String, f64)>) -> Self {
        let mut ranked: Vec<RankedLabel> =
            ranked.into_iter().map(|(s, c)| RankedLabel { site: Some(s), confidence: c }).collect();
        while ranked.len() < 2 {
            ranked.push(RankedLabel { site: None, confidence: 0.0 });
        }
        Prediction { instance_id: instance_id.to_string(), true_site: true_site.to_string(), ranked, nearest_distance: None }
    }

    pub fn predicted(&self) -> Option<&str> {
        self.ranked[0].site.as_deref()
    }

    pub fn p1(&self) -> f64 {
        self.ranked[0].confidence
    }

    pub fn p2(&self) -> f64 {
        self.ranked[1].confidence
    }

    pub fn is_correct(&self) -> bool {
        self.predicted() == Some(self.true_site.as_str())
    }

    /// Instance ids are only unique within a site.
    pub fn key(&self) -> (String, String) {
        (self.true_site.clone(), self.instance_id.clone())
    }
}

/// Rank sites by descending confidence, breaking ties by site id.
pub(crate) fn rank_by_confidence(classes: &[String], conf: &[f64]) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then_with(|| classes[a].cmp(&classes[b])));
    order.into_iter().map(|i| (classes[i].clone(), conf[i])).collect()
}

/// Predictions as CSV: `instance,true,pred1,conf1,pred2,conf2`.
pub fn write_predictions_csv<W: std::io::Write>(preds: &[Prediction], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["instance", "true", "pred1", "conf1", "pred2", "conf2"])?;
    for p in preds {
        wr.write_record([
            p.instance_id.as_str(),
            p.true_site.as_str(),
            p.ranked[0].site.as_deref().unwrap_or(""),
            &p.p1().to_string(),
            p.ranked[1].site.as_deref().unwrap_or(""),
            &p.p2().to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default)]
    pub knn: KnnConfig,
    #[serde(default)]
    pub cumul: CumulConfig,
    #[serde(default)]
    pub kfp: KfpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Knn(KnnModel),
    Cumul(SvmModel),
    Kfp(KfpModel),
}

/// A fitted classifier. Immutable; prediction takes `&self`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub version: u32,
    pub classifier: ClassifierId,
    pub featureset: FeatureSet,
    pub seed: u64,
    /// SHA-256 over the training rows, labels and feature names.
    pub training_digest: String,
    pub params: ModelParams,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn matrix_digest(m: &FeatureMatrix) -> String {
    let mut h = Sha256::new();
    h.update(m.featureset.as_str().as_bytes());
    for n in &m.feature_names {
        h.update(n.as_bytes());
        h.update([0]);
    }
    for ((row, label), id) in m.rows.iter().zip(&m.labels).zip(&m.instance_ids) {
        h.update(label.as_bytes());
        h.update([0]);
        h.update(id.as_bytes());
        h.update([0]);
        for x in row {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn check_training(m: &FeatureMatrix, expected: FeatureSet) -> Result<(), AttackError> {
    if m.featureset != expected {
        return Err(AttackError::FeatureSetMismatch { expected, got: m.featureset });
    }
    if m.is_empty() {
        return Err(AttackError::EmptyTraining);
    }
    check_finite(m)
}

fn check_finite(m: &FeatureMatrix) -> Result<(), AttackError> {
    for (i, r) in m.rows.iter().enumerate() {
        if let Some(j) = r.iter().position(|x| !x.is_finite()) {
            return Err(AttackError::NonFinite { row: i, column: j });
        }
    }
    Ok(())
}

/// Fit `classifier` on `train`.
pub fn fit(classifier: ClassifierId, train: &FeatureMatrix, cfg: &AttackConfig, seed: u64) -> Result<TrainedModel, AttackError> {
    check_training(train, classifier.featureset())?;
    let mut warnings = Vec::new();
    let params = match classifier {
        ClassifierId::Knn => ModelParams::Knn(KnnModel::fit(train, &cfg.knn, seed)?),
        ClassifierId::Cumul => ModelParams::Cumul(SvmModel::fit(train, &cfg.cumul, seed)?),
        ClassifierId::Kfp => {
            let (m, w) = KfpModel::fit(train, &cfg.kfp, seed)?;
            warnings = w;
            ModelParams::Kfp(m)
        }
    };
    Ok(TrainedModel {
        version: MODEL_FORMAT_VERSION,
        classifier,
        featureset: classifier.featureset(),
        seed,
        training_digest: matrix_digest(train),
        params,
        warnings,
    })
}

impl TrainedModel {
    pub fn predict(&self, test: &FeatureMatrix) -> Result<Vec<Prediction>, AttackError> {
        if test.featureset != self.featureset {
            return Err(AttackError::FeatureSetMismatch { expected: self.featureset, got: test.featureset });
        }
        check_finite(test)?;
        match &self.params {
            ModelParams::Knn(m) => m.predict(test),
            ModelParams::Cumul(m) => m.predict(test),
            ModelParams::Kfp(m) => m.predict(test),
        }
    }

    pub fn to_json(&self) -> Result<String, AttackError> {
        serde_json::to_string(self).map_err(|e| AttackError::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, AttackError> {
        let m: TrainedModel = serde_json::from_str(s).map_err(|e| AttackError::Serialization(e.to_string()))?;
        if m.version != MODEL_FORMAT_VERSION {
            return Err(AttackError::Serialization(format!("unsupported model version {}", m.version)));
        }
        Ok(m)
    }
}

/// Weighted-distance k-NN with learned feature weights.
pub fn knn_classifier(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &KnnConfig, seed: u64) -> Result<Vec<Prediction>, AttackError> {
    let cfg = AttackConfig { knn: cfg.clone(), ..Default::default() };
    fit(ClassifierId::Knn, train, &cfg, seed)?.predict(test)
}

/// One-vs-rest RBF SVM over Min-Max scaled CUMUL features.
pub fn cumul_classifier(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &CumulConfig, seed: u64) -> Result<Vec<Prediction>, AttackError> {
    let cfg = AttackConfig { cumul: cfg.clone(), ..Default::default() };
    fit(ClassifierId::Cumul, train, &cfg, seed)?.predict(test)
}

/// Closed-world random forest over k-FP features.
pub fn kfp_classifier(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &KfpConfig, seed: u64) -> Result<Vec<Prediction>, AttackError> {
    let cfg = AttackConfig { kfp: cfg.clone(), ..Default::default() };
    fit(ClassifierId::Kfp, train, &cfg, seed)?.predict(test)
}

/// Distinct sorted labels and each row's index into them.
pub(crate) fn encode_labels(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let classes: Vec<String> = {
        let set: std::collections::BTreeSet<&String> = labels.iter().collect();
        set.into_iter().cloned().collect()
    };
    let y = labels.iter().map(|l| classes.binary_search(l).expect("label present")).collect();
    (classes, y)
}
