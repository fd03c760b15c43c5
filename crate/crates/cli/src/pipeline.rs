//! The stages behind each subcommand. A [`Pipeline`] loads what a stage
//! needs on first use, so `all` runs every stage over one sanitized dataset
//! while single stages reuse cached features and predictions on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use onionprint::attacks::{write_predictions_csv, ClassifierId, Prediction};
use onionprint::congraph::{
    build_graph, community_summary, detect_communities, export_graph, graph_statistics, modularity, GraphFormat,
};
use onionprint::derive_seed;
use onionprint::evaluation::{
    cross_validate_matrices, ensemble, error_overlap, fingerprintability_scores, improvement_bound, site_metrics,
    symmetry_fraction, write_scores_csv, EvaluationSummary,
};
use onionprint::netfeat::{build_matrix, FeatureMatrix, FeatureSet};
use onionprint::sitefeat::{
    aggregate_site_profile, fingerprintability_regressor, load_crawl_records, top_bottom_comparison, write_profiles_csv,
    SiteError,
};
use onionprint::synthgen::generate_world;
use onionprint::trace_store::{load_dataset, sanitize, Dataset, SanitizationReport};
use onionprint::variance::{
    confusion_sizes, interpolated_profile, rank_features, smallest_subset, tukey_outlier_report, write_confusion_sizes_csv,
    write_variance_csv, write_zscore_csv, zscore_report, FeatureVarianceRow,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

const ENSEMBLE_FILE: &str = "predictions_ensemble.csv";
const FEATURE_DIR: &str = "features";
const FEATURE_DIGESTS: &str = "digests.json";
const EVALUATION_STAMP: &str = "evaluation.json";

struct Evaluation {
    base: BTreeMap<ClassifierId, Vec<Prediction>>,
    ensemble: Vec<Prediction>,
}

impl Evaluation {
    fn all_base(&self) -> Vec<&[Prediction]> {
        self.base.values().map(|p| &p[..]).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct EvaluationStamp {
    digest: String,
    classifiers: Vec<ClassifierId>,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    classifier: &'a str,
    instances: usize,
    tpr: f64,
    fpr: f64,
}

pub struct Pipeline<'a> {
    cfg: &'a RunConfig,
    dataset: Option<Dataset>,
    dataset_digest: Option<String>,
    matrices: Option<BTreeMap<ClassifierId, FeatureMatrix>>,
    feature_digests: Option<BTreeMap<FeatureSet, String>>,
    evaluation: Option<Evaluation>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv { path: path.to_path_buf(), source }
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Digest of every packet of every trace, in dataset order.
fn dataset_digest(d: &Dataset) -> String {
    let mut h = Sha256::new();
    for t in d.traces() {
        h.update(t.site_id.as_bytes());
        h.update([0]);
        h.update(t.instance_id.as_bytes());
        h.update([0]);
        for p in &t.packets {
            h.update(p.time.to_le_bytes());
            h.update(p.signed_size().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("output types serialize");
    s.push(b'\n');
    s
}

/// Read back a file written by [`write_predictions_csv`]. Only the top two
/// ranks survive the round trip.
fn read_predictions(path: &Path) -> Result<Vec<Prediction>, CliError> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.len() != 6 {
            return Err(CliError::Invalid(format!("{}: expected 6 columns, found {}", path.display(), rec.len())));
        }
        let conf = |i: usize| -> Result<f64, CliError> {
            rec[i].parse().map_err(|_| CliError::Invalid(format!("{}: bad confidence {:?}", path.display(), &rec[i])))
        };
        let mut ranked = Vec::new();
        for (site, c) in [(2, 3), (4, 5)] {
            if !rec[site].is_empty() {
                ranked.push((rec[site].to_string(), conf(c)?));
            }
        }
        out.push(Prediction::from_ranked(&rec[0], &rec[1], ranked));
    }
    Ok(out)
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Pipeline { cfg, dataset: None, dataset_digest: None, matrices: None, feature_digests: None, evaluation: None }
    }

    fn out_path(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.cfg.output_dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        Ok(p)
    }

    fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.out_path(name)?;
        fs::write(&p, bytes).map_err(io(&p))?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<(), CliError> {
        self.write_bytes(name, &to_json(v)).map(|_| ())
    }

    fn write_csv(&self, name: &str, f: impl FnOnce(BufWriter<File>) -> Result<(), csv::Error>) -> Result<(), CliError> {
        let p = self.out_path(name)?;
        let file = File::create(&p).map_err(io(&p))?;
        f(BufWriter::new(file)).map_err(csv_err(&p))
    }

    pub fn generate(&self) -> Result<(), CliError> {
        let mut spec = self.cfg.world.clone().ok_or(CliError::MissingWorld)?;
        spec.seed = self.cfg.seed;
        let m = generate_world(&spec, &self.cfg.dataset_root)?;
        log::info!("wrote {} sites to {}", m.sites.len(), self.cfg.dataset_root.display());
        Ok(())
    }

    fn load(&mut self) -> Result<&Dataset, CliError> {
        if self.dataset.is_none() {
            let root = &self.cfg.dataset_root;
            if !root.is_dir() {
                return Err(CliError::MissingDataset(root.clone()));
            }
            let raw = load_dataset(root)?;
            for f in &raw.failed {
                log::warn!("skipping {}/{}: {}", f.site_id, f.instance_id, f.reason);
            }
            let (d, report) = match &self.cfg.sanitize {
                Some(sc) => sanitize(&raw, sc)?,
                None => (raw, SanitizationReport::default()),
            };
            log::info!("{} sites, {} traces after sanitization", d.num_sites(), d.num_traces());
            self.write_json("sanitization.json", &report)?;
            self.dataset = Some(d);
        }
        Ok(self.dataset.as_ref().expect("just loaded"))
    }

    pub fn sanitize(&mut self) -> Result<(), CliError> {
        self.load().map(|_| ())
    }

    fn feature_digest(&mut self, fs: FeatureSet) -> Result<String, CliError> {
        if self.dataset_digest.is_none() {
            self.dataset_digest = Some(dataset_digest(self.load()?));
        }
        let d = self.dataset_digest.clone().expect("just computed");
        let fc = serde_json::to_vec(&self.cfg.features).expect("config serializes");
        Ok(sha_hex(&[d.as_bytes(), fs.as_str().as_bytes(), &fc]))
    }

    fn ensure_matrices(&mut self) -> Result<(), CliError> {
        if self.matrices.is_some() {
            return Ok(());
        }
        let cache_dir = self.cfg.output_dir.join(FEATURE_DIR);
        let digest_path = cache_dir.join(FEATURE_DIGESTS);
        let cached: BTreeMap<FeatureSet, String> = fs::read(&digest_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        let mut digests = cached.clone();
        let mut matrices = BTreeMap::new();
        for &c in &self.cfg.classifiers {
            let fs = c.featureset();
            let digest = self.feature_digest(fs)?;
            let csv_path = cache_dir.join(format!("{fs}.features.csv"));
            let hit = cached.get(&fs) == Some(&digest) && csv_path.is_file();
            let m = if hit {
                log::info!("reusing cached {fs} features");
                let f = File::open(&csv_path).map_err(io(&csv_path))?;
                FeatureMatrix::read_csv(fs, std::io::BufReader::new(f))?
            } else {
                log::info!("extracting {fs} features");
                let features = self.cfg.features;
                let m = build_matrix(self.load()?, fs, &features)?;
                let p = self.out_path(&format!("{FEATURE_DIR}/{fs}.features.csv"))?;
                let f = File::create(&p).map_err(io(&p))?;
                let mut w = BufWriter::new(f);
                m.write_csv(&mut w)?;
                w.flush().map_err(io(&p))?;
                digests.insert(fs, digest);
                m
            };
            matrices.insert(c, m);
        }
        if digests != cached {
            self.write_json(&format!("{FEATURE_DIR}/{FEATURE_DIGESTS}"), &digests)?;
        }
        self.feature_digests = Some(digests);
        self.matrices = Some(matrices);
        Ok(())
    }

    pub fn features(&mut self) -> Result<(), CliError> {
        self.ensure_matrices()
    }

    fn evaluation_digest(&mut self) -> Result<String, CliError> {
        self.ensure_matrices()?;
        let digests = self.feature_digests.as_ref().expect("set with matrices");
        let mut parts: Vec<Vec<u8>> = Vec::new();
        for c in &self.cfg.classifiers {
            parts.push(c.as_str().as_bytes().to_vec());
            parts.push(digests[&c.featureset()].as_bytes().to_vec());
        }
        parts.push(serde_json::to_vec(&self.cfg.attacks).expect("config serializes"));
        parts.push(self.cfg.folds.to_le_bytes().to_vec());
        parts.push(self.cfg.seed.to_le_bytes().to_vec());
        parts.push(self.cfg.ensemble.as_str().as_bytes().to_vec());
        let refs: Vec<&[u8]> = parts.iter().map(|p| &p[..]).collect();
        Ok(sha_hex(&refs))
    }

    /// Run cross-validation, the ensemble and every evaluation report.
    pub fn evaluate(&mut self) -> Result<(), CliError> {
        self.ensure_matrices()?;
        let digest = self.evaluation_digest()?;
        let cfg = self.cfg;
        let matrices = self.matrices.as_ref().expect("ensured");
        log::info!("{}-fold cross-validation of {} classifiers", cfg.folds, matrices.len());
        let cv = cross_validate_matrices(matrices, cfg.folds, &cfg.attacks, cfg.seed)?;
        for m in matrices.values() {
            if m.len() != cv.folds.len() {
                return Err(CliError::Invalid("feature matrices disagree on instances".into()));
            }
        }
        let base: Vec<(ClassifierId, &[Prediction])> = cv.predictions.iter().map(|(c, p)| (*c, &p[..])).collect();
        let combined = ensemble(&base, cfg.ensemble, derive_seed(cfg.seed, "ensemble"))?;

        let mut summaries: Vec<EvaluationSummary> = Vec::new();
        for (c, p) in &cv.predictions {
            self.write_csv(&format!("predictions_{c}.csv"), |w| write_predictions_csv(p, w))?;
            let s = site_metrics(c.as_str(), p)?;
            self.write_csv(&format!("metrics_{c}.csv"), |w| s.write_csv(w))?;
            summaries.push(s);
        }
        self.write_csv(ENSEMBLE_FILE, |w| write_predictions_csv(&combined, w))?;
        let es = site_metrics(cfg.ensemble.as_str(), &combined)?;
        self.write_csv("metrics.csv", |w| es.write_csv(w))?;
        let scores = fingerprintability_scores(&combined)?;
        self.write_csv("fingerprintability.csv", |w| write_scores_csv(&scores, w))?;
        summaries.push(es);

        let mut symmetry = BTreeMap::new();
        for (c, p) in &cv.predictions {
            symmetry.insert(c.to_string(), symmetry_fraction(p));
        }
        symmetry.insert(cfg.ensemble.to_string(), symmetry_fraction(&combined));
        self.write_json("symmetry.json", &symmetry)?;

        if base.len() == 3 {
            let lists = [base[0], base[1], base[2]];
            self.write_json("overlap.json", &error_overlap(lists)?)?;
        } else {
            log::warn!("error overlap needs exactly three classifiers; overlap.json not written");
        }
        let best = summaries[..base.len()]
            .iter()
            .zip(&base)
            .max_by(|(a, _), (b, _)| a.tpr.total_cmp(&b.tpr))
            .map(|(_, (c, _))| *c)
            .expect("at least one classifier");
        let others: Vec<&[Prediction]> = base.iter().filter(|(c, _)| *c != best).map(|(_, p)| *p).collect();
        let bound = improvement_bound(&cv.predictions[&best], &others)?;

        let rows: Vec<SummaryRow> =
            summaries.iter().map(|s| SummaryRow { classifier: &s.classifier, instances: s.instances, tpr: s.tpr, fpr: s.fpr }).collect();
        self.write_json(
            "summary.json",
            &serde_json::json!({ "classifiers": rows, "best": best, "improvement_bound": bound }),
        )?;
        print_summary(&summaries, best, bound);

        self.write_json(EVALUATION_STAMP, &EvaluationStamp { digest, classifiers: cfg.classifiers.clone() })?;
        self.evaluation = Some(Evaluation { base: cv.predictions, ensemble: combined });
        Ok(())
    }

    /// Predictions from this run, from a matching earlier run, or from a
    /// fresh evaluation.
    fn ensure_evaluation(&mut self) -> Result<(), CliError> {
        if self.evaluation.is_some() {
            return Ok(());
        }
        let digest = self.evaluation_digest()?;
        let stamp_path = self.cfg.output_dir.join(EVALUATION_STAMP);
        let stamp: Option<EvaluationStamp> = fs::read(&stamp_path).ok().and_then(|b| serde_json::from_slice(&b).ok());
        if stamp.is_some_and(|s| s.digest == digest) {
            let mut base = BTreeMap::new();
            let mut ok = true;
            for &c in &self.cfg.classifiers {
                let p = self.cfg.output_dir.join(format!("predictions_{c}.csv"));
                if !p.is_file() {
                    ok = false;
                    break;
                }
                base.insert(c, read_predictions(&p)?);
            }
            let ens = self.cfg.output_dir.join(ENSEMBLE_FILE);
            if ok && ens.is_file() {
                log::info!("reusing predictions from an earlier evaluation");
                self.evaluation = Some(Evaluation { base, ensemble: read_predictions(&ens)? });
                return Ok(());
            }
        }
        self.evaluate()
    }

    pub fn variance(&mut self) -> Result<(), CliError> {
        let a = self.cfg.analyses.clone();
        if !(a.variance || a.zscore || a.tukey) {
            log::info!("variance analyses disabled");
            return Ok(());
        }
        self.ensure_matrices()?;
        let cfg = self.cfg;
        if a.variance {
            let small = smallest_subset(self.load()?, cfg.variance.small_fraction)?;
            let small_sites: BTreeSet<String> = small.sites.keys().cloned().collect();
            let matrices = self.matrices.as_ref().expect("ensured");
            let mut combined: Vec<FeatureVarianceRow> = Vec::new();
            for (c, m) in matrices {
                let fs = c.featureset();
                let rows = rank_features(m)?;
                self.write_csv(&format!("variance_{fs}.csv"), |w| write_variance_csv(&rows, w))?;
                combined.extend(rows.into_iter().map(|r| FeatureVarianceRow { feature: format!("{fs}:{}", r.feature), ..r }));
                if fs == FeatureSet::Cumul {
                    let profile = interpolated_profile(m)?;
                    self.write_csv("cumul_profile.csv", |w| {
                        let mut wr = csv::Writer::from_writer(w);
                        wr.write_record(["point", "rel_diff"])?;
                        for (i, v) in profile.iter().enumerate() {
                            wr.write_record([(i + 1).to_string(), v.to_string()])?;
                        }
                        wr.flush()?;
                        Ok(())
                    })?;
                }
                if small_sites.len() >= 2 {
                    let idx: Vec<usize> = (0..m.len()).filter(|&i| small_sites.contains(&m.labels[i])).collect();
                    let rows = rank_features(&m.select(&idx))?;
                    self.write_csv(&format!("variance_small_{fs}.csv"), |w| write_variance_csv(&rows, w))?;
                } else {
                    log::warn!("smallest-site subset has {} site(s); small-site ranking skipped", small_sites.len());
                }
            }
            combined.sort_by(|x, y| y.rel_diff.total_cmp(&x.rel_diff).then_with(|| x.feature.cmp(&y.feature)));
            self.write_csv("variance.csv", |w| write_variance_csv(&combined, w))?;
        }
        if a.zscore || a.tukey {
            self.ensure_evaluation()?;
            let ev = self.evaluation.as_ref().expect("ensured");
            let matrices = self.matrices.as_ref().expect("ensured");
            let all = ev.all_base();
            let find = |f: &str| {
                cfg.classifiers
                    .iter()
                    .map(|c| &matrices[c])
                    .find(|m| m.feature_index(f).is_some())
                    .ok_or_else(|| CliError::Invalid(format!("no configured feature set has feature {f:?}")))
            };
            let mut zs = Vec::new();
            let mut tukey = Vec::new();
            for f in &cfg.variance.deviation_features {
                let m = find(f)?;
                if a.zscore {
                    zs.push(zscore_report(m, f, &all)?);
                }
                if a.tukey {
                    tukey.push(tukey_outlier_report(m, f, &all, cfg.variance.tukey_k)?);
                }
            }
            if a.zscore {
                self.write_csv("zscore.csv", |w| write_zscore_csv(&zs, w))?;
                let summary: Vec<_> = zs
                    .iter()
                    .map(|r| {
                        serde_json::json!({
                            "feature": r.feature,
                            "mean_z_correct": r.mean_z_correct,
                            "mean_z_misclassified": r.mean_z_misclassified,
                        })
                    })
                    .collect();
                self.write_json("zscore_summary.json", &summary)?;
            }
            if a.tukey {
                self.write_json("tukey.json", &tukey)?;
            }
            let graph_preds = &ev.base[&cfg.graph_classifier()];
            let sizes = confusion_sizes(self.dataset.as_ref().expect("loaded with matrices"), graph_preds);
            self.write_csv("confusion_sizes.csv", |w| write_confusion_sizes_csv(&sizes, w))?;
        }
        Ok(())
    }

    pub fn graph(&mut self) -> Result<(), CliError> {
        if !self.cfg.analyses.graph {
            log::info!("graph analysis disabled");
            return Ok(());
        }
        self.ensure_evaluation()?;
        let cfg = self.cfg;
        let clf = cfg.graph_classifier();
        let sizes = self.load()?.median_incoming_bytes();
        let preds = &self.evaluation.as_ref().expect("ensured").base[&clf];
        let mut g = build_graph(preds);
        let communities = detect_communities(&g, cfg.graph.resolution, derive_seed(cfg.seed, "louvain"))?;
        let q = modularity(&g, &communities, cfg.graph.resolution);
        g.communities = Some(communities.clone());
        let stats = graph_statistics(&g);
        let symmetry = symmetry_fraction(preds);
        let summary = community_summary(&communities, &sizes);
        self.write_bytes("graph.graphml", &export_graph(&g, GraphFormat::Graphml))?;
        self.write_bytes("graph.dot", &export_graph(&g, GraphFormat::Dot))?;
        self.write_json(
            "graph_stats.json",
            &serde_json::json!({
                "classifier": clf,
                "statistics": stats,
                "modularity": q,
                "symmetry": symmetry,
                "communities": summary,
            }),
        )
    }

    pub fn sitefeat(&mut self) -> Result<(), CliError> {
        if !self.cfg.analyses.sitefeat {
            log::info!("site-level analysis disabled");
            return Ok(());
        }
        let cfg = self.cfg;
        let kept: BTreeSet<String> = self.load()?.sites.keys().cloned().collect();
        let records = load_crawl_records(&cfg.dataset_root)?;
        let mut profiles = BTreeMap::new();
        for (site, recs) in records.iter().filter(|(s, _)| kept.contains(*s)) {
            profiles.insert(site.clone(), aggregate_site_profile(site, recs, &cfg.sitefeat.ad_rules)?);
        }
        if profiles.is_empty() {
            log::warn!("no crawl records under {}; site-level analysis skipped", cfg.dataset_root.display());
            return Ok(());
        }
        self.write_csv("site_profiles.csv", |w| write_profiles_csv(&profiles, w))?;
        self.ensure_evaluation()?;
        let scores = fingerprintability_scores(&self.evaluation.as_ref().expect("ensured").ensemble)?;
        match fingerprintability_regressor(&profiles, &scores, &cfg.sitefeat.regressor, derive_seed(cfg.seed, "regressor")) {
            Ok(report) => {
                self.write_csv("site_importance.csv", |w| report.write_importance_csv(w))?;
                self.write_json(
                    "regression.json",
                    &serde_json::json!({ "predictions": report.predictions, "balance": report.balance }),
                )?;
            }
            Err(e @ SiteError::OneSided { .. }) => log::warn!("regressor skipped: {e}"),
            Err(e) => return Err(e.into()),
        }
        let n = cfg.sitefeat.top_n.min(profiles.len() / 2);
        if n >= 1 {
            self.write_json("top_bottom.json", &top_bottom_comparison(&profiles, &scores, n)?)?;
        }
        Ok(())
    }

    pub fn all(&mut self) -> Result<(), CliError> {
        self.sanitize()?;
        self.features()?;
        self.evaluate()?;
        self.variance()?;
        self.graph()?;
        self.sitefeat()
    }
}

fn print_summary(rows: &[EvaluationSummary], best: ClassifierId, bound: f64) {
    println!("{:<12} {:>9} {:>9} {:>10}", "classifier", "TPR", "FPR", "instances");
    for s in rows {
        println!("{:<12} {:>8.2}% {:>8.2}% {:>10}", s.classifier, 100.0 * s.tpr, 100.0 * s.fpr, s.instances);
    }
    println!("instances {best} misses that another classifier gets right: {:.2}%", 100.0 * bound);
}
