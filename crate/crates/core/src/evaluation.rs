//! Stratified cross-validation, one-vs-rest metrics, ensembles, and error
//! overlap accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackError, ClassifierId, Prediction};
use crate::derive_seed;
use crate::netfeat::{self, FeatureConfig, FeatureError, FeatureMatrix};
use crate::trace_store::Dataset;

/// `(site, instance)`; instance ids are only unique within a site.
pub type InstanceKey = (String, String);

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("need at least 2 folds, got {0}")]
    InvalidFolds(usize),
    #[error("site {site} has {have} instances, fewer than {need} folds")]
    TooFewInstances { site: String, have: usize, need: usize },
    #[error("duplicate instance {site}/{instance}")]
    DuplicateInstance { site: String, instance: String },
    #[error("prediction lists are not aligned: {0}")]
    Misaligned(String),
    #[error("no predictions")]
    Empty,
    #[error("unknown ensemble strategy {0:?}")]
    UnknownStrategy(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Stratified fold per row: each site's rows are shuffled and dealt
/// round-robin, so fold sizes within a site differ by at most one.
pub fn fold_assignment(labels: &[String], ids: &[String], k: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidFolds(k));
    }
    let mut by_site: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_site.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; labels.len()];
    for (site, mut rows) in by_site {
        if rows.len() < k {
            return Err(EvalError::TooFewInstances { site: site.to_string(), have: rows.len(), need: k });
        }
        // shuffle a canonical order so the assignment ignores row order
        rows.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        rows.shuffle(&mut rng);
        for (pos, i) in rows.into_iter().enumerate() {
            out[i] = pos % k;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub folds: BTreeMap<InstanceKey, usize>,
    /// One prediction per instance, in key order.
    pub predictions: BTreeMap<ClassifierId, Vec<Prediction>>,
}

/// Cross-validate each classifier on its own feature matrix. All matrices
/// must hold the same instances; they share one fold assignment.
pub fn cross_validate_matrices(
    matrices: &BTreeMap<ClassifierId, FeatureMatrix>,
    k: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<CvResult, EvalError> {
    let (first_id, first) = matrices.iter().next().ok_or(EvalError::Empty)?;
    let assign = fold_assignment(&first.labels, &first.instance_ids, k, derive_seed(seed, "folds"))?;
    let folds: BTreeMap<InstanceKey, usize> = first
        .labels
        .iter()
        .zip(&first.instance_ids)
        .zip(&assign)
        .map(|((l, i), &f)| ((l.clone(), i.clone()), f))
        .collect();
    if folds.len() != first.len() {
        return Err(EvalError::Misaligned(format!("{first_id} matrix has duplicate instances")));
    }
    let mut jobs = Vec::new();
    for (&clf, m) in matrices {
        let mut fold_of = Vec::with_capacity(m.len());
        for (l, i) in m.labels.iter().zip(&m.instance_ids) {
            let f = folds.get(&(l.clone(), i.clone())).ok_or_else(|| {
                EvalError::Misaligned(format!("{clf} has instance {l}/{i} missing from {first_id}"))
            })?;
            fold_of.push(*f);
        }
        if m.len() != folds.len() {
            return Err(EvalError::Misaligned(format!("{clf} has {} rows, {first_id} has {}", m.len(), folds.len())));
        }
        for f in 0..k {
            jobs.push((clf, m, fold_of.clone(), f));
        }
    }
    let results: Vec<(ClassifierId, Result<Vec<Prediction>, AttackError>)> = jobs
        .into_par_iter()
        .map(|(clf, m, fold_of, f)| {
            let train: Vec<usize> = (0..m.len()).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..m.len()).filter(|&i| fold_of[i] == f).collect();
            let s = derive_seed(seed, &format!("{clf}/fold{f}"));
            let r = attacks::fit(clf, &m.select(&train), cfg, s).and_then(|model| model.predict(&m.select(&test)));
            (clf, r)
        })
        .collect();
    let mut predictions: BTreeMap<ClassifierId, Vec<Prediction>> = BTreeMap::new();
    for (clf, r) in results {
        predictions.entry(clf).or_default().extend(r?);
    }
    for preds in predictions.values_mut() {
        preds.sort_by(|a, b| a.key().cmp(&b.key()));
    }
    Ok(CvResult { folds, predictions })
}

/// Extract features and cross-validate the given classifiers on `d`.
pub fn cross_validate(
    d: &Dataset,
    classifiers: &[ClassifierId],
    k: usize,
    features: &FeatureConfig,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<CvResult, EvalError> {
    let mut matrices = BTreeMap::new();
    for &c in classifiers {
        matrices.insert(c, netfeat::build_matrix(d, c.featureset(), features)?);
    }
    cross_validate_matrices(&matrices, k, cfg, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMetrics {
    pub site_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SiteMetrics {
    pub fn from_counts(site_id: &str, tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // harmonic mean of precision and recall, in counts
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        SiteMetrics { site_id: site_id.to_string(), tp, fp, fn_, precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub classifier: String,
    pub instances: usize,
    pub tpr: f64,
    /// Closed-world complement of the TPR.
    pub fpr: f64,
    pub per_site: Vec<SiteMetrics>,
}

impl EvaluationSummary {
    pub fn totals(&self) -> SiteMetrics {
        let tp = self.per_site.iter().map(|s| s.tp).sum();
        let fp = self.per_site.iter().map(|s| s.fp).sum();
        let fn_ = self.per_site.iter().map(|s| s.fn_).sum();
        SiteMetrics::from_counts("TOTAL", tp, fp, fn_)
    }

    /// `site,tp,fp,fn,precision,recall,f1`, one row per site and a TOTAL row.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["site", "tp", "fp", "fn", "precision", "recall", "f1"])?;
        for s in self.per_site.iter().chain(std::iter::once(&self.totals())) {
            wr.write_record([
                s.site_id.clone(),
                s.tp.to_string(),
                s.fp.to_string(),
                s.fn_.to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
                s.f1.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Index predictions by instance key, rejecting duplicates.
pub fn index_predictions(preds: &[Prediction]) -> Result<BTreeMap<InstanceKey, &Prediction>, EvalError> {
    let mut out = BTreeMap::new();
    for p in preds {
        if out.insert(p.key(), p).is_some() {
            return Err(EvalError::DuplicateInstance { site: p.true_site.clone(), instance: p.instance_id.clone() });
        }
    }
    Ok(out)
}

/// One-vs-rest counts per site.
pub fn site_metrics(classifier: &str, preds: &[Prediction]) -> Result<EvaluationSummary, EvalError> {
    index_predictions(preds)?;
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for p in preds {
        counts.entry(&p.true_site).or_default();
        match p.predicted() {
            Some(guess) if guess == p.true_site => counts.get_mut(p.true_site.as_str()).unwrap().0 += 1,
            guess => {
                counts.get_mut(p.true_site.as_str()).unwrap().2 += 1;
                if let Some(g) = guess {
                    counts.entry(g).or_default().1 += 1;
                }
            }
        }
    }
    let per_site: Vec<SiteMetrics> =
        counts.into_iter().map(|(s, (tp, fp, fn_))| SiteMetrics::from_counts(s, tp, fp, fn_)).collect();
    let tp: usize = per_site.iter().map(|s| s.tp).sum();
    let tpr = if preds.is_empty() { 0.0 } else { tp as f64 / preds.len() as f64 };
    Ok(EvaluationSummary { classifier: classifier.to_string(), instances: preds.len(), tpr, fpr: 1.0 - tpr, per_site })
}

/// Per-site F1, keyed by every site that has instances.
pub fn fingerprintability_scores(preds: &[Prediction]) -> Result<BTreeMap<String, f64>, EvalError> {
    let sites: BTreeSet<&str> = preds.iter().map(|p| p.true_site.as_str()).collect();
    Ok(site_metrics("", preds)?
        .per_site
        .into_iter()
        .filter(|s| sites.contains(s.site_id.as_str()))
        .map(|s| (s.site_id, s.f1))
        .collect())
}

pub fn write_scores_csv<W: std::io::Write>(scores: &BTreeMap<String, f64>, w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["site", "f1"])?;
    for (s, f) in scores {
        wr.write_record([s.as_str(), &f.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Random,
    MaxConf,
    P1p2,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::MaxConf, Strategy::P1p2];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "RANDOM",
            Strategy::MaxConf => "MAX_CONF",
            Strategy::P1p2 => "P1P2",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "RANDOM" => Ok(Strategy::Random),
            "MAX_CONF" | "MAXCONF" => Ok(Strategy::MaxConf),
            "P1P2" | "P1_P2" => Ok(Strategy::P1p2),
            _ => Err(EvalError::UnknownStrategy(s.to_string())),
        }
    }
}

/// Fixed precedence for ties between base classifiers.
pub const TIE_ORDER: [ClassifierId; 3] = [ClassifierId::Cumul, ClassifierId::Kfp, ClassifierId::Knn];

fn tie_rank(c: ClassifierId) -> usize {
    TIE_ORDER.iter().position(|&t| t == c).expect("every classifier is ranked")
}

/// Align several prediction lists by instance key.
fn align<'a>(lists: &[(ClassifierId, &'a [Prediction])]) -> Result<Vec<(InstanceKey, Vec<&'a Prediction>)>, EvalError> {
    let indexed: Vec<BTreeMap<InstanceKey, &Prediction>> =
        lists.iter().map(|(_, p)| index_predictions(p)).collect::<Result<_, _>>()?;
    let Some(first) = indexed.first() else {
        return Err(EvalError::Empty);
    };
    for (ix, (clf, _)) in indexed.iter().zip(lists).skip(1) {
        if ix.len() != first.len() || !ix.keys().eq(first.keys()) {
            return Err(EvalError::Misaligned(format!("{clf} covers different instances than {}", lists[0].0)));
        }
    }
    Ok(first.keys().map(|k| (k.clone(), indexed.iter().map(|ix| ix[k]).collect())).collect())
}

/// Combine base predictions instance by instance.
pub fn ensemble(base: &[(ClassifierId, &[Prediction])], strategy: Strategy, seed: u64) -> Result<Vec<Prediction>, EvalError> {
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.sort_by_key(|&i| tie_rank(base[i].0));
    let aligned = align(base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(aligned
        .into_iter()
        .map(|(_, preds)| {
            let pick = match strategy {
                Strategy::Random => order[rng.random_range(0..order.len())],
                Strategy::MaxConf => best_by(&order, |i| preds[i].p1()),
                Strategy::P1p2 => best_by(&order, |i| preds[i].p1() - preds[i].p2()),
            };
            preds[pick].clone()
        })
        .collect())
}

/// First index (in `order`) with the largest score.
fn best_by(order: &[usize], score: impl Fn(usize) -> f64) -> usize {
    let mut best = order[0];
    for &i in &order[1..] {
        if score(i) > score(best) {
            best = i;
        }
    }
    best
}

/// Fractions over the 7 regions of a 3-set Venn diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Venn {
    /// Number of counted elements; the fractions are 0 when it is 0.
    pub total: usize,
    /// Region label (classifier names joined by `+`) to fraction.
    pub regions: BTreeMap<String, f64>,
}

impl Venn {
    fn from_counts(names: &[String; 3], counts: [usize; 8]) -> Self {
        let total: usize = counts[1..].iter().sum();
        let regions = (1..8usize)
            .map(|mask| {
                let label: Vec<&str> = (0..3).filter(|b| mask & (1 << b) != 0).map(|b| names[b].as_str()).collect();
                let f = if total == 0 { 0.0 } else { counts[mask] as f64 / total as f64 };
                (label.join("+"), f)
            })
            .collect();
        Venn { total, regions }
    }

    pub fn region(&self, members: &[&str]) -> f64 {
        self.regions.get(&members.join("+")).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub classifiers: [String; 3],
    /// Misclassified instances, by which classifiers erred.
    pub erred: Venn,
    /// (instance, wrong label) pairs, by which classifiers guessed that label.
    pub same_guess: Venn,
}

/// Venn accounting of three classifiers' errors.
pub fn error_overlap(lists: [(ClassifierId, &[Prediction]); 3]) -> Result<OverlapReport, EvalError> {
    let aligned = align(&lists)?;
    let names = lists.map(|(c, _)| c.to_string());
    let mut erred = [0usize; 8];
    let mut same = [0usize; 8];
    for (_, preds) in &aligned {
        let mut mask = 0;
        let mut by_label: BTreeMap<Option<&str>, usize> = BTreeMap::new();
        for (b, p) in preds.iter().enumerate() {
            if !p.is_correct() {
                mask |= 1 << b;
                *by_label.entry(p.predicted()).or_default() |= 1 << b;
            }
        }
        erred[mask] += 1;
        for m in by_label.into_values() {
            same[m] += 1;
        }
    }
    Ok(OverlapReport {
        erred: Venn::from_counts(&names, erred),
        same_guess: Venn::from_counts(&names, same),
        classifiers: names,
    })
}

/// Share of all instances the best classifier misses but some other
/// classifier gets right.
pub fn improvement_bound(best: &[Prediction], others: &[&[Prediction]]) -> Result<f64, EvalError> {
    let mut lists = vec![(ClassifierId::Cumul, best)];
    lists.extend(others.iter().map(|o| (ClassifierId::Knn, *o)));
    let aligned = align(&lists)?;
    if aligned.is_empty() {
        return Ok(0.0);
    }
    let gain = aligned.iter().filter(|(_, p)| !p[0].is_correct() && p[1..].iter().any(|q| q.is_correct())).count();
    Ok(gain as f64 / aligned.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub fraction: f64,
    pub symmetric_count: usize,
    pub total_misclassifications: usize,
}

/// Share of misclassifications A->B for which some B->A also occurs.
pub fn symmetry_fraction(preds: &[Prediction]) -> SymmetryReport {
    let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for p in preds {
        if let Some(g) = p.predicted() {
            if g != p.true_site {
                *pairs.entry((p.true_site.as_str(), g)).or_default() += 1;
            }
        }
    }
    let total: usize = pairs.values().sum();
    let symmetric: usize = pairs.iter().filter(|((a, b), _)| pairs.contains_key(&(*b, *a))).map(|(_, n)| n).sum();
    SymmetryReport {
        fraction: if total == 0 { 0.0 } else { symmetric as f64 / total as f64 },
        symmetric_count: symmetric,
        total_misclassifications: total,
    }
}

/// Instances misclassified by at least one of the lists.
pub fn erred_by_any(lists: &[&[Prediction]]) -> BTreeSet<InstanceKey> {
    lists.iter().flat_map(|l| l.iter()).filter(|p| !p.is_correct()).map(Prediction::key).collect()
}
