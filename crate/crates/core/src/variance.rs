//! Classifier-independent feature analysis: inter- versus intra-class
//! variance, per-instance deviation from the class mean, and Tukey fences.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::Prediction;
use crate::evaluation::{erred_by_any, InstanceKey};
use crate::netfeat::{FeatureMatrix, FeatureSet};
use crate::stats;
use crate::trace_store::Dataset;

#[derive(Debug, thiserror::Error)]
pub enum VarianceError {
    #[error("relative difference of negative values ({0}, {1})")]
    NegativeInput(f64, f64),
    #[error("need at least 2 sites")]
    SingleClass,
    #[error("site {0} has fewer than 2 rows")]
    TooFewRows(String),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("expected a {expected} matrix, got {got}")]
    WrongFeatureSet { expected: FeatureSet, got: FeatureSet },
    #[error("fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// `(x - y) / ((x + y) / 2)`, in `[-2, 2]`; 0 when both are 0.
pub fn relative_difference(x: f64, y: f64) -> Result<f64, VarianceError> {
    if x < 0.0 || y < 0.0 || x.is_nan() || y.is_nan() {
        return Err(VarianceError::NegativeInput(x, y));
    }
    if x + y == 0.0 {
        return Ok(0.0);
    }
    Ok(((x - y) / ((x + y) / 2.0)).clamp(-2.0, 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVarianceRow {
    pub feature: String,
    pub intra: f64,
    pub inter: f64,
    pub rel_diff: f64,
}

/// Row indices per site.
fn groups(labels: &[String]) -> BTreeMap<&str, Vec<usize>> {
    let mut g: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        g.entry(l).or_default().push(i);
    }
    g
}

/// `(intra, inter)` for one column. Variances below the column's floating
/// point resolution count as 0, so rounding noise in a constant feature does
/// not read as signal.
fn column_variances(col: &[f64], groups: &BTreeMap<&str, Vec<usize>>) -> (f64, f64) {
    let scale = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (scale * 1e-12).powi(2);
    let clean = |v: f64| if v <= floor { 0.0 } else { v };
    let mut means = Vec::with_capacity(groups.len());
    let mut vars = Vec::with_capacity(groups.len());
    for rows in groups.values() {
        let v: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
        means.push(stats::mean(&v));
        vars.push(stats::variance(&v));
    }
    (clean(stats::mean(&vars)), clean(stats::variance(&means)))
}

/// Every feature's variance row, most discriminative first (ties by name).
pub fn rank_features(m: &FeatureMatrix) -> Result<Vec<FeatureVarianceRow>, VarianceError> {
    let g = groups(&m.labels);
    if g.len() < 2 {
        return Err(VarianceError::SingleClass);
    }
    if let Some((site, _)) = g.iter().find(|(_, rows)| rows.len() < 2) {
        return Err(VarianceError::TooFewRows(site.to_string()));
    }
    let mut rows: Vec<FeatureVarianceRow> = (0..m.width())
        .into_par_iter()
        .map(|j| {
            let (intra, inter) = column_variances(&m.column(j), &g);
            let rel_diff = relative_difference(inter, intra).expect("variances are non-negative");
            FeatureVarianceRow { feature: m.feature_names[j].clone(), intra, inter, rel_diff }
        })
        .collect();
    rows.sort_by(|a, b| b.rel_diff.total_cmp(&a.rel_diff).then_with(|| a.feature.cmp(&b.feature)));
    Ok(rows)
}

pub fn write_variance_csv<W: std::io::Write>(rows: &[FeatureVarianceRow], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["feature", "intra", "inter", "rel_diff"])?;
    for r in rows {
        wr.write_record([r.feature.clone(), r.intra.to_string(), r.inter.to_string(), r.rel_diff.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Relative difference of each interpolated CUMUL coordinate, in trace order.
pub fn interpolated_profile(m: &FeatureMatrix) -> Result<Vec<f64>, VarianceError> {
    if m.featureset != FeatureSet::Cumul {
        return Err(VarianceError::WrongFeatureSet { expected: FeatureSet::Cumul, got: m.featureset });
    }
    let by_name: BTreeMap<String, f64> = rank_features(m)?.into_iter().map(|r| (r.feature, r.rel_diff)).collect();
    Ok(m.feature_names.iter().filter(|n| n.starts_with("cumul_")).map(|n| by_name[n]).collect())
}

/// `ceil(fraction * n)`, tolerant of floating-point overshoot.
pub fn subset_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// The sites with the smallest median incoming bytes (ties by site id).
pub fn smallest_subset(d: &Dataset, fraction: f64) -> Result<Dataset, VarianceError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(VarianceError::InvalidFraction(fraction));
    }
    let mut sizes: Vec<(String, f64)> = d.median_incoming_bytes().into_iter().collect();
    sizes.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let keep: BTreeSet<String> = sizes.into_iter().take(subset_size(fraction, d.num_sites())).map(|(s, _)| s).collect();
    Ok(d.restrict_to(&keep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRecord {
    pub site: String,
    pub instance_id: String,
    pub feature: String,
    pub z: f64,
    pub correctly_classified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZscoreReport {
    pub feature: String,
    pub records: Vec<DeviationRecord>,
    pub mean_z_correct: f64,
    pub mean_z_misclassified: f64,
}

/// `|x - mean| / std` of each value against its own group; 0 when std is 0.
fn group_z(col: &[f64], rows: &[usize]) -> Vec<f64> {
    let v: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
    let (mean, sd) = (stats::mean(&v), stats::std_dev(&v));
    v.iter().map(|x| if sd > 0.0 { ((x - mean) / sd).abs() } else { 0.0 }).collect()
}

fn feature_column(m: &FeatureMatrix, feature: &str) -> Result<Vec<f64>, VarianceError> {
    let j = m.feature_index(feature).ok_or_else(|| VarianceError::UnknownFeature(feature.to_string()))?;
    Ok(m.column(j))
}

/// Z-scores of one feature; an instance counts as misclassified when any of
/// `preds` erred on it.
pub fn zscore_report(m: &FeatureMatrix, feature: &str, preds: &[&[Prediction]]) -> Result<ZscoreReport, VarianceError> {
    let col = feature_column(m, feature)?;
    let erred = erred_by_any(preds);
    let mut records = Vec::with_capacity(m.len());
    for rows in groups(&m.labels).values() {
        for (&i, z) in rows.iter().zip(group_z(&col, rows)) {
            let key: InstanceKey = (m.labels[i].clone(), m.instance_ids[i].clone());
            records.push(DeviationRecord {
                site: key.0.clone(),
                instance_id: key.1.clone(),
                feature: feature.to_string(),
                z,
                correctly_classified: !erred.contains(&key),
            });
        }
    }
    let zs = |ok: bool| -> Vec<f64> { records.iter().filter(|r| r.correctly_classified == ok).map(|r| r.z).collect() };
    Ok(ZscoreReport {
        feature: feature.to_string(),
        mean_z_correct: stats::mean(&zs(true)),
        mean_z_misclassified: stats::mean(&zs(false)),
        records,
    })
}

pub fn write_zscore_csv<W: std::io::Write>(reports: &[ZscoreReport], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["site", "instance", "feature", "z", "misclassified"])?;
    for r in reports.iter().flat_map(|r| &r.records) {
        wr.write_record([
            r.site.as_str(),
            r.instance_id.as_str(),
            r.feature.as_str(),
            &r.z.to_string(),
            if r.correctly_classified { "0" } else { "1" },
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyReport {
    pub feature: String,
    pub k: f64,
    pub outliers: usize,
    pub misclassified_outliers: usize,
    pub correct_outliers: usize,
    /// Sites with fewer than 4 rows, left out of the count.
    pub skipped_sites: Vec<String>,
}

/// Lower and upper Tukey fences of a sample.
pub fn tukey_fences(values: &[f64], k: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, q3) = (stats::quantile_sorted(&v, 0.25), stats::quantile_sorted(&v, 0.75));
    let iqr = q3 - q1;
    (q1 - k * iqr, q3 + k * iqr)
}

pub fn tukey_outlier_report(m: &FeatureMatrix, feature: &str, preds: &[&[Prediction]], k: f64) -> Result<TukeyReport, VarianceError> {
    let col = feature_column(m, feature)?;
    let erred = erred_by_any(preds);
    let mut report = TukeyReport {
        feature: feature.to_string(),
        k,
        outliers: 0,
        misclassified_outliers: 0,
        correct_outliers: 0,
        skipped_sites: Vec::new(),
    };
    for (site, rows) in groups(&m.labels) {
        if rows.len() < 4 {
            report.skipped_sites.push(site.to_string());
            continue;
        }
        let v: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
        let (lo, hi) = tukey_fences(&v, k);
        for (&i, &x) in rows.iter().zip(&v) {
            if x < lo || x > hi {
                report.outliers += 1;
                if erred.contains(&(m.labels[i].clone(), m.instance_ids[i].clone())) {
                    report.misclassified_outliers += 1;
                } else {
                    report.correct_outliers += 1;
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSize {
    pub instance: String,
    pub true_site: String,
    pub predicted_site: String,
    pub true_median: f64,
    pub predicted_median: f64,
    pub true_normalized: f64,
    pub predicted_normalized: f64,
}

/// For each misclassified instance, the median incoming bytes of the true
/// and the predicted site. Normalized columns use the min and max incoming
/// bytes over all instances of `d`.
pub fn confusion_sizes(d: &Dataset, preds: &[Prediction]) -> Vec<ConfusionSize> {
    let medians = d.median_incoming_bytes();
    let all: Vec<f64> = d.traces().map(|t| t.incoming_bytes() as f64).collect();
    let (lo, hi) = (stats::min(&all), stats::max(&all));
    let norm = |x: f64| stats::min_max_scale(x, lo, hi, 0.0, 1.0);
    preds
        .iter()
        .filter_map(|p| {
            let guess = p.predicted()?;
            if guess == p.true_site {
                return None;
            }
            let (t, g) = (*medians.get(&p.true_site)?, *medians.get(guess)?);
            Some(ConfusionSize {
                instance: p.instance_id.clone(),
                true_site: p.true_site.clone(),
                predicted_site: guess.to_string(),
                true_median: t,
                predicted_median: g,
                true_normalized: norm(t),
                predicted_normalized: norm(g),
            })
        })
        .collect()
}

pub fn write_confusion_sizes_csv<W: std::io::Write>(rows: &[ConfusionSize], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    if rows.is_empty() {
        wr.write_record(["instance", "true_site", "predicted_site", "true_median", "predicted_median", "true_normalized", "predicted_normalized"])?;
    }
    wr.flush()?;
    Ok(())
}
