//! Network-level feature extraction for the three attacks, and the labeled
//! feature matrix the classifiers and analyses consume.

mod cumul;
mod kfp;
mod knn;

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::trace_store::{Dataset, PacketTrace};

pub use cumul::{cumul_feature_names, cumulative_sizes, extract_cumul, CUMUL_LEN, INTERPOLATION_POINTS};
pub use kfp::{concentration, extract_kfp, kfp_feature_names, CONCENTRATION_CHUNK, HEAD_TAIL, KFP_FEATURE_NAMES, MIN_DURATION};
pub use knn::{extract_knn, knn_feature_names, outgoing_bursts, KnnFeatureConfig};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("trace {0} has no packets")]
    EmptyTrace(String),
    #[error("dataset has no traces")]
    EmptyDataset,
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("unknown feature set {0:?}")]
    UnknownFeatureSet(String),
    #[error("feature csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for FeatureError {
    fn from(e: csv::Error) -> Self {
        FeatureError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FeatureSet {
    Cumul,
    Knn,
    Kfp,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::Cumul, FeatureSet::Knn, FeatureSet::Kfp];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSet::Cumul => "CUMUL",
            FeatureSet::Knn => "KNN",
            FeatureSet::Kfp => "KFP",
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSet {
    type Err = FeatureError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CUMUL" => Ok(FeatureSet::Cumul),
            "KNN" => Ok(FeatureSet::Knn),
            "KFP" => Ok(FeatureSet::Kfp),
            _ => Err(FeatureError::UnknownFeatureSet(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    #[serde(default)]
    pub knn: KnnFeatureConfig,
}

pub fn feature_names(fs: FeatureSet, cfg: &FeatureConfig) -> Vec<String> {
    match fs {
        FeatureSet::Cumul => cumul_feature_names(),
        FeatureSet::Knn => knn_feature_names(&cfg.knn),
        FeatureSet::Kfp => kfp_feature_names(),
    }
}

pub fn extract(fs: FeatureSet, t: &PacketTrace, cfg: &FeatureConfig) -> Result<Vec<f64>, FeatureError> {
    match fs {
        FeatureSet::Cumul => extract_cumul(t),
        FeatureSet::Knn => extract_knn(t, &cfg.knn),
        FeatureSet::Kfp => extract_kfp(t),
    }
}

/// Per-feature `[min, max]` bounds for Min-Max scaling onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxBounds {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let width = rows.first().map_or(0, Vec::len);
        let mut min = vec![f64::INFINITY; width];
        let mut max = vec![f64::NEG_INFINITY; width];
        for r in rows {
            for (j, &x) in r.iter().enumerate() {
                min[j] = min[j].min(x);
                max[j] = max[j].max(x);
            }
        }
        MinMaxBounds { min, max }
    }

    /// Scale one row; constant features map to 0. Values outside the fitted
    /// range extrapolate linearly.
    pub fn scale(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &x)| crate::stats::min_max_scale(x, self.min[j], self.max[j], -1.0, 1.0))
            .collect()
    }
}

/// Instances × named features for one feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub featureset: FeatureSet,
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Site id per row.
    pub labels: Vec<String>,
    pub instance_ids: Vec<String>,
    /// Present for CUMUL matrices: bounds over all rows.
    pub bounds: Option<MinMaxBounds>,
}

impl FeatureMatrix {
    pub fn new(
        featureset: FeatureSet,
        feature_names: Vec<String>,
        rows: Vec<Vec<f64>>,
        labels: Vec<String>,
        instance_ids: Vec<String>,
    ) -> Self {
        assert_eq!(rows.len(), labels.len());
        assert_eq!(rows.len(), instance_ids.len());
        debug_assert!(rows.iter().all(|r| r.len() == feature_names.len()));
        let bounds = (featureset == FeatureSet::Cumul && !rows.is_empty()).then(|| MinMaxBounds::fit(&rows));
        FeatureMatrix { featureset, feature_names, rows, labels, instance_ids, bounds }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Distinct labels in sorted order.
    pub fn classes(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&String> = self.labels.iter().collect();
        set.into_iter().cloned().collect()
    }

    /// Row subset (in the given order).
    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix::new(
            self.featureset,
            self.feature_names.clone(),
            idx.iter().map(|&i| self.rows[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i].clone()).collect(),
            idx.iter().map(|&i| self.instance_ids[i].clone()).collect(),
        )
    }

    /// `site,instance,<features…>`, values in shortest round-trip notation.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FeatureError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["site".to_string(), "instance".to_string()];
        header.extend(self.feature_names.iter().cloned());
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.labels[i].clone(), self.instance_ids[i].clone()];
            rec.extend(self.rows[i].iter().map(|x| x.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| FeatureError::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(featureset: FeatureSet, r: R) -> Result<FeatureMatrix, FeatureError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.len() < 2 || &header[0] != "site" || &header[1] != "instance" {
            return Err(FeatureError::Csv("header must start with site,instance".into()));
        }
        let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let (mut rows, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != names.len() + 2 {
                return Err(FeatureError::Csv(format!("row has {} fields, expected {}", rec.len(), names.len() + 2)));
            }
            labels.push(rec[0].to_string());
            ids.push(rec[1].to_string());
            let row = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|e| FeatureError::Csv(format!("{v:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(FeatureMatrix::new(featureset, names, rows, labels, ids))
    }
}

/// One row per trace in (site_id, instance_id) order.
pub fn build_matrix(d: &Dataset, fs: FeatureSet, cfg: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    let traces: Vec<&PacketTrace> = d.traces().collect();
    if traces.is_empty() {
        return Err(FeatureError::EmptyDataset);
    }
    let rows = traces.par_iter().map(|t| extract(fs, t, cfg)).collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureMatrix::new(
        fs,
        feature_names(fs, cfg),
        rows,
        traces.iter().map(|t| t.site_id.clone()).collect(),
        traces.iter().map(|t| t.instance_id.clone()).collect(),
    ))
}
