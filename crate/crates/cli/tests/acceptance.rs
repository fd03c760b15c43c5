//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any required criterion fails. Set `ONIONPRINT_REFERENCE_DATA`
//! to a dataset root in the trace format to run the optional reference-TPR
//! check.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use onionprint::attacks::{AttackConfig, ClassifierId, Prediction};
use onionprint::congraph::{build_graph, detect_communities, graph_statistics};
use onionprint::evaluation::{cross_validate_matrices, ensemble, error_overlap, site_metrics, symmetry_fraction, CvResult, SiteMetrics, Strategy};
use onionprint::netfeat::{build_matrix, extract_cumul, extract_kfp, kfp_feature_names, FeatureConfig, FeatureMatrix};
use onionprint::sitefeat::{fingerprintability_regressor, site_feature_names, RegressorConfig, SiteProfile, SIZE_FEATURES};
use onionprint::stats::quantile_sorted;
use onionprint::synthgen::{simulate_world, to_dataset, SmallSites, WorldSpec};
use onionprint::trace_store::{load_dataset, sanitize, Dataset, Direction, Packet, PacketTrace, SanitizeConfig};
use onionprint::variance::{rank_features, smallest_subset, tukey_outlier_report, zscore_report};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct World {
    matrices: BTreeMap<ClassifierId, FeatureMatrix>,
    cv: CvResult,
}

fn run_world(spec: &WorldSpec, clean: bool, folds: usize) -> World {
    let raw = to_dataset(&simulate_world(spec).expect("valid world"));
    let data = if clean { sanitize(&raw, &SanitizeConfig::default()).expect("sanitizes").0 } else { raw };
    let fc = FeatureConfig::default();
    let matrices: BTreeMap<ClassifierId, FeatureMatrix> =
        ClassifierId::ALL.iter().map(|&c| (c, build_matrix(&data, c.featureset(), &fc).expect("features"))).collect();
    let cv = cross_validate_matrices(&matrices, folds, &AttackConfig::default(), spec.seed).expect("cv");
    World { matrices, cv }
}

fn tpr(p: &[Prediction]) -> f64 {
    site_metrics("", p).expect("metrics").tpr
}

// --- feature oracles -------------------------------------------------------

fn random_trace(rng: &mut ChaCha8Rng, i: usize) -> PacketTrace {
    let n = rng.random_range(1..300);
    let mut time = 0.0;
    let packets = (0..n)
        .map(|k| {
            if k > 0 && rng.random_bool(0.85) {
                time += rng.random_range(0.0..0.1);
            }
            let direction = if rng.random_bool(0.35) { Direction::Out } else { Direction::In };
            Packet { time, direction, size: rng.random_range(1..=1500) }
        })
        .collect();
    PacketTrace { site_id: "s".into(), instance_id: i.to_string(), packets }
}

fn cumul_oracle(t: &PacketTrace) -> Vec<f64> {
    let signed: Vec<f64> =
        t.packets.iter().map(|p| if p.direction == Direction::In { p.size as f64 } else { -(p.size as f64) }).collect();
    let curve: Vec<f64> = signed.iter().scan(0.0, |acc, s| {
        *acc += s;
        Some(*acc)
    }).collect();
    let n_in = signed.iter().filter(|s| **s > 0.0).count() as f64;
    let b_in: f64 = signed.iter().filter(|s| **s > 0.0).sum();
    let b_out: f64 = -signed.iter().filter(|s| **s < 0.0).sum::<f64>();
    let mut out = vec![n_in, signed.len() as f64 - n_in, b_in, b_out];
    let last = (curve.len() - 1) as f64;
    for j in 0..100 {
        let x = last * j as f64 / 99.0;
        let k = (x.floor() as usize).min(curve.len() - 1);
        let v = if k + 1 < curve.len() { curve[k] + (curve[k + 1] - curve[k]) * (x - k as f64) } else { curve[k] };
        out.push(v);
    }
    out
}

fn kfp_direct(t: &PacketTrace, name: &str) -> Option<f64> {
    let p = &t.packets;
    let n = p.len() as f64;
    let outs = p.iter().filter(|q| q.direction == Direction::Out).count() as f64;
    let pos = |d: Direction| -> Vec<f64> { p.iter().enumerate().filter(|(_, q)| q.direction == d).map(|(i, _)| i as f64).collect() };
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let std = |v: &[f64]| {
        if v.is_empty() {
            return 0.0;
        }
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let conc: Vec<f64> =
        p.chunks(20).map(|c| c.iter().filter(|q| q.direction == Direction::Out).count() as f64).collect();
    let dur = p[p.len() - 1].time;
    Some(match name {
        "total_packets" => n,
        "incoming_packets" => n - outs,
        "outgoing_packets" => outs,
        "percent_incoming" => (n - outs) / n,
        "percent_outgoing" => outs / n,
        "duration" => dur,
        "packets_per_second" => n / if dur > 0.0 { dur } else { 1e-6 },
        "concentration_sum" => conc.iter().sum(),
        "concentration_mean" => mean(&conc),
        "concentration_std" => std(&conc),
        "order_in_mean" => mean(&pos(Direction::In)),
        "order_in_std" => std(&pos(Direction::In)),
        "order_out_mean" => mean(&pos(Direction::Out)),
        "order_out_std" => std(&pos(Direction::Out)),
        _ => return None,
    })
}

fn features_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let names = kfp_feature_names();
    let (mut worst, mut kfp_checked, mut kfp_mismatch) = (0.0f64, 0, 0);
    for i in 0..50 {
        let t = random_trace(&mut rng, i);
        let got = extract_cumul(&t).expect("non-empty");
        for (g, w) in got.iter().zip(cumul_oracle(&t)) {
            worst = worst.max((g - w).abs());
        }
        let k = extract_kfp(&t).expect("non-empty");
        for (j, n) in names.iter().enumerate() {
            if let Some(w) = kfp_direct(&t, n) {
                kfp_checked += 1;
                if k[j] != w {
                    kfp_mismatch += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && kfp_mismatch == 0 && secs < 10.0,
        format!("max CUMUL deviation {worst:.2e}; k-FP {kfp_mismatch}/{kfp_checked} mismatches; {secs:.2}s"),
    )
}

// --- metrics identities ----------------------------------------------------

fn random_predictions(rng: &mut ChaCha8Rng, n: usize, truth: &[usize]) -> Vec<Prediction> {
    (0..n)
        .map(|i| {
            let guess = rng.random_range(0..6);
            let runner = (guess + 1) % 6;
            let c = rng.random_range(0.5..1.0);
            Prediction::from_ranked(
                &i.to_string(),
                &format!("s{}", truth[i]),
                vec![(format!("s{guess}"), c), (format!("s{runner}"), 1.0 - c)],
            )
        })
        .collect()
}

fn metrics_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    for round in 0..200 {
        let n = rng.random_range(1..80);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let lists: Vec<Vec<Prediction>> = (0..3).map(|_| random_predictions(&mut rng, n, &truth)).collect();
        let s = site_metrics("x", &lists[0]).expect("metrics");
        let fp: usize = s.per_site.iter().map(|m| m.fp).sum();
        let fn_: usize = s.per_site.iter().map(|m| m.fn_).sum();
        if fp != fn_ || s.totals().f1 != s.tpr {
            failures.push(format!("round {round}: fp {fp} fn {fn_} micro-F1 {} tpr {}", s.totals().f1, s.tpr));
        }
        let r = error_overlap([
            (ClassifierId::Knn, &lists[0]),
            (ClassifierId::Cumul, &lists[1]),
            (ClassifierId::Kfp, &lists[2]),
        ])
        .expect("aligned");
        for v in [&r.erred, &r.same_guess] {
            let sum: f64 = v.regions.values().sum();
            if v.total > 0 && (sum - 1.0).abs() > 1e-9 {
                failures.push(format!("round {round}: Venn sums to {sum}"));
            }
        }
    }
    let row = SiteMetrics::from_counts("x", 4, 84, 66);
    if (row.f1 - 0.05).abs() > 0.005 {
        failures.push(format!("tp=4 fp=84 fn=66 gives F1 {}", row.f1));
    }
    check(failures.is_empty(), if failures.is_empty() { format!("200 random sets; reference row F1 {:.4}", row.f1) } else { failures.join("; ") })
}

// --- synthetic worlds ------------------------------------------------------

fn separable_spec() -> WorldSpec {
    WorldSpec { n_sites: 10, size_ratio: 2.0, dynamism: 0.01, instances_per_site: 70, seed: 11, ..Default::default() }
}

fn separable(w: &World, secs: f64) -> Outcome {
    let base: Vec<(ClassifierId, &[Prediction])> = w.cv.predictions.iter().map(|(c, p)| (*c, &p[..])).collect();
    let e = ensemble(&base, Strategy::P1p2, 1).expect("ensemble");
    let t: BTreeMap<ClassifierId, f64> = w.cv.predictions.iter().map(|(c, p)| (*c, tpr(p))).collect();
    let best = t.values().copied().fold(0.0, f64::max);
    let te = tpr(&e);
    check(
        t[&ClassifierId::Cumul] >= 0.95 && t[&ClassifierId::Kfp] >= 0.95 && te >= best - 0.005 && secs < 300.0,
        format!(
            "kNN {:.4}, CUMUL {:.4}, k-FP {:.4}, P1P2 {te:.4}; {secs:.1}s",
            t[&ClassifierId::Knn], t[&ClassifierId::Cumul], t[&ClassifierId::Kfp]
        ),
    )
}

fn confusable() -> Outcome {
    let spec = WorldSpec { n_sites: 5, confusable_pairs: 5, dynamism: 0.05, instances_per_site: 70, seed: 12, ..Default::default() };
    let w = run_world(&spec, true, 10);
    let preds = &w.cv.predictions[&ClassifierId::Cumul];
    let g = build_graph(preds);
    let comm = detect_communities(&g, 1.0, 12).expect("non-empty graph");
    let stats = graph_statistics(&g);
    let pairs: Vec<(String, String)> = (0..5).map(|i| (format!("site{i:03}"), format!("site{i:03}_twin"))).collect();
    let together = pairs.iter().filter(|(a, b)| comm[a] == comm[b]).count();
    let ellipses = pairs.iter().filter(|p| stats.ellipse_pairs.contains(p)).count();
    let sym = symmetry_fraction(preds).fraction;
    check(
        together == 5 && sym >= 0.5 && ellipses >= 4,
        format!("{together}/5 pairs share a community; symmetry {sym:.3}; {ellipses}/5 ellipse pairs"),
    )
}

fn variance_ranking(w: &World) -> Outcome {
    let rows = rank_features(&w.matrices[&ClassifierId::Cumul]).expect("ranking");
    let totals = ["incoming_bytes", "outgoing_bytes", "incoming_count", "outgoing_count"];
    let top = &rows[0];
    let best_total = rows.iter().find(|r| totals.contains(&r.feature.as_str())).expect("totals present");
    let still = WorldSpec { dynamism: 0.0, instances_per_site: 20, ..separable_spec() };
    let d = to_dataset(&simulate_world(&still).expect("valid"));
    let m = build_matrix(&d, onionprint::netfeat::FeatureSet::Cumul, &FeatureConfig::default()).expect("features");
    let r0 = rank_features(&m).expect("ranking");
    let inc = r0.iter().find(|r| r.feature == "incoming_bytes").expect("present").rel_diff;
    check(
        totals.contains(&top.feature.as_str()) && inc == 2.0,
        format!(
            "top {} ({:.7}), best total {} ({:.7}); static world incoming_bytes rel_diff {inc}",
            top.feature, top.rel_diff, best_total.feature, best_total.rel_diff
        ),
    )
}

fn small_sites() -> Outcome {
    let spec = WorldSpec {
        n_sites: 20,
        size_ratio: 1.3,
        dynamism: 0.01,
        small_sites: Some(SmallSites { count: 2, dynamism: 0.3 }),
        instances_per_site: 70,
        seed: 13,
        ..Default::default()
    };
    let d = sanitize(&to_dataset(&simulate_world(&spec).expect("valid")), &SanitizeConfig::default()).expect("sanitizes").0;
    let sub = smallest_subset(&d, 0.1).expect("subset");
    let fc = FeatureConfig::default();
    let mut seen_sub = Vec::new();
    let mut seen_full = Vec::new();
    for c in ClassifierId::ALL {
        let top_std = |data: &Dataset| -> Vec<String> {
            let m = build_matrix(data, c.featureset(), &fc).expect("features");
            rank_features(&m).expect("ranking").iter().take(5).filter(|r| r.feature.ends_with("_std")).map(|r| r.feature.clone()).collect()
        };
        seen_sub.extend(top_std(&sub).into_iter().map(|f| format!("{c}:{f}")));
        seen_full.extend(top_std(&d).into_iter().map(|f| format!("{c}:{f}")));
    }
    let only_sub: Vec<&String> = seen_sub.iter().filter(|f| !seen_full.contains(f)).collect();
    check(
        !only_sub.is_empty(),
        format!("{} subset sites; std features in subset top 5 {seen_sub:?}, in full top 5 {seen_full:?}", sub.num_sites()),
    )
}

fn zscore_tukey() -> Outcome {
    let spec = WorldSpec { n_sites: 10, dynamism: 0.05, outlier_rate: 0.05, instances_per_site: 70, seed: 14, ..Default::default() };
    let w = run_world(&spec, false, 10);
    let all: Vec<&[Prediction]> = w.cv.predictions.values().map(|p| &p[..]).collect();
    let m = &w.matrices[&ClassifierId::Cumul];
    let z = zscore_report(m, "incoming_bytes", &all).expect("report");
    let t = tukey_outlier_report(m, "incoming_bytes", &all, 1.5).expect("report");

    let erred: BTreeSet<(String, String)> =
        all.iter().flat_map(|l| l.iter()).filter(|p| !p.is_correct()).map(|p| p.key()).collect();
    let col = m.column(m.feature_index("incoming_bytes").expect("feature"));
    let (mut n, mut mis, mut cor) = (0, 0, 0);
    let mut by_site: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in m.labels.iter().enumerate() {
        by_site.entry(l).or_default().push(i);
    }
    for rows in by_site.values() {
        let mut v: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
        v.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75));
        let (lo, hi) = (q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1));
        for &i in rows {
            if col[i] < lo || col[i] > hi {
                n += 1;
                if erred.contains(&(m.labels[i].clone(), m.instance_ids[i].clone())) {
                    mis += 1;
                } else {
                    cor += 1;
                }
            }
        }
    }
    let counts_match = (t.outliers, t.misclassified_outliers, t.correct_outliers) == (n, mis, cor);
    check(
        z.mean_z_misclassified > z.mean_z_correct && counts_match,
        format!(
            "mean |z| misclassified {:.3} vs correct {:.3}; Tukey {}/{}/{} vs oracle {n}/{mis}/{cor}",
            z.mean_z_misclassified, z.mean_z_correct, t.outliers, t.misclassified_outliers, t.correct_outliers
        ),
    )
}

fn regressor() -> Outcome {
    // 60 sites whose score is a function of page weight alone; the other
    // features are seeded noise
    let names = site_feature_names();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut profiles = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for i in 0..60 {
        let weight = 10_000.0 * 1.08f64.powi(i);
        let values: Vec<f64> = names
            .iter()
            .map(|n| match n.as_str() {
                "page_weight" => weight,
                "total_request_size" => weight * 0.05,
                "html_source_size" => weight * 0.2,
                "screenshot_size" => weight * 0.01,
                _ if n.starts_with("has_") || n.starts_with("made_with") => rng.random_range(0..2) as f64,
                _ => rng.random_range(0.0..50.0f64).floor(),
            })
            .collect();
        let site = format!("site{i:03}");
        profiles.insert(site.clone(), SiteProfile { visits: 5, values, page_weight_std: 0.0 });
        scores.insert(site, i as f64 / 59.0);
    }
    let r = fingerprintability_regressor(&profiles, &scores, &RegressorConfig::default(), 15).expect("fits");
    let size_share = r.importance_of(&SIZE_FEATURES);
    let b = &r.balance;
    let high = b.training_sites.iter().filter(|s| scores[*s] >= 0.5).count();
    let low = b.training_sites.len() - high;
    let middle: BTreeSet<&String> = scores.iter().filter(|(_, &v)| v > 0.33 && v < 0.66).map(|(s, _)| s).collect();
    let removed: BTreeSet<&String> = b.middle_removed.iter().collect();
    let excluded = removed == middle && !b.training_sites.iter().any(|s| middle.contains(s));
    check(
        size_share >= 0.8 && high == low && excluded,
        format!("size-family importance {size_share:.3}; {high} high / {low} low; {} middle sites excluded", middle.len()),
    )
}

// --- end-to-end determinism ------------------------------------------------

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).expect("readable") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).expect("under root").display().to_string(), std::fs::read(&p).expect("readable"));
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{
  "dataset_root": "world",
  "seed": 31,
  "folds": 5,
  "sanitize": {"instances_per_site": 30},
  "world": {"n_sites": 6, "confusable_pairs": 2, "size_ratio": 1.5, "dynamism": 0.1, "instances_per_site": 32}
}"#,
    )
    .expect("writable");
    let bin = env!("CARGO_BIN_EXE_onionprint");
    let run = |args: &[&str]| {
        let st = Command::new(bin).args(args).arg("--config").arg(&cfg).output().expect("runs");
        (st.status.success(), String::from_utf8_lossy(&st.stderr).into_owned())
    };
    let (ok, err) = run(&["generate"]);
    if !ok {
        return Err(format!("generate failed: {err}"));
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let (ok, err) = run(&["all", "--out", out.to_str().expect("utf-8 path")]);
        if !ok {
            return Err(format!("all failed: {err}"));
        }
    }
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<&String> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).collect();
    let checked = ta.keys().filter(|k| k.ends_with(".csv") || k.ends_with(".json") || k.ends_with(".graphml")).count();
    check(
        differing.is_empty() && ta.keys().eq(tb.keys()) && checked > 0,
        format!("{checked} CSV/JSON/GraphML files compared; differing {differing:?}"),
    )
}

fn reference_dataset() -> Option<Outcome> {
    let root = std::env::var_os("ONIONPRINT_REFERENCE_DATA")?;
    let d = match load_dataset(Path::new(&root)).and_then(|d| sanitize(&d, &SanitizeConfig::default())) {
        Ok((d, _)) => d,
        Err(e) => return Some(Err(format!("could not load reference data: {e}"))),
    };
    let fc = FeatureConfig::default();
    let matrices: BTreeMap<ClassifierId, FeatureMatrix> =
        ClassifierId::ALL.iter().map(|&c| (c, build_matrix(&d, c.featureset(), &fc).expect("features"))).collect();
    let cv = cross_validate_matrices(&matrices, 10, &AttackConfig::default(), 0).expect("cv");
    let want = [(ClassifierId::Knn, 0.6997), (ClassifierId::Cumul, 0.8073), (ClassifierId::Kfp, 0.7771)];
    let got: Vec<(ClassifierId, f64, f64)> = want.iter().map(|&(c, w)| (c, tpr(&cv.predictions[&c]), w)).collect();
    Some(check(
        got.iter().all(|(_, g, w)| (g - w).abs() <= 0.03),
        got.iter().map(|(c, g, w)| format!("{c} {g:.4} (reference {w:.4})")).collect::<Vec<_>>().join(", "),
    ))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, r: Outcome| match r {
        Ok(d) => println!("PASS  {name}: {d}"),
        Err(d) => {
            failed += 1;
            println!("FAIL  {name}: {d}");
        }
    };
    report("feature oracles", features_oracle());
    report("metrics identities", metrics_identities());
    let start = Instant::now();
    let sep = run_world(&separable_spec(), true, 10);
    let secs = start.elapsed().as_secs_f64();
    report("separable world", separable(&sep, secs));
    report("confusable world", confusable());
    report("variance ranking", variance_ranking(&sep));
    report("small-site dynamism", small_sites());
    report("z-score and Tukey", zscore_tukey());
    report("regressor sanity", regressor());
    report("determinism", determinism());
    match reference_dataset() {
        Some(Ok(d)) => println!("PASS  reference TPRs (optional): {d}"),
        Some(Err(d)) => println!("FAIL  reference TPRs (optional): {d}"),
        None => println!("SKIP  reference TPRs (optional): ONIONPRINT_REFERENCE_DATA not set"),
    }
    if failed > 0 {
        println!("{failed} required criteria failed");
        std::process::exit(1);
    }
}
