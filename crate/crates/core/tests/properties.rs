use std::collections::BTreeSet;

use onionprint::attacks::{ClassifierId, Prediction};
use onionprint::congraph::{build_graph, detect_communities, export_graph, parse_graph, GraphFormat};
use onionprint::evaluation::{ensemble, error_overlap, fold_assignment, site_metrics, symmetry_fraction, Strategy as Combine};
use onionprint::netfeat::{FeatureMatrix, FeatureSet};
use onionprint::stats::quantile_sorted;
use onionprint::trace_store::{parse_trace, sanitize, Dataset, Direction, Packet, PacketTrace, SanitizeConfig};
use onionprint::variance::{rank_features, relative_difference, tukey_outlier_report, zscore_report};
use proptest::prelude::*;

const SITES: [&str; 5] = ["a", "b", "c", "d", "e"];

/// One instance: true site index, then a ranking of all sites with
/// confidences summing to 1.
fn prediction(id: usize) -> impl Strategy<Value = Prediction> {
    (0..SITES.len(), Just(()).prop_perturb(|_, mut rng| {
        let mut order: Vec<usize> = (0..SITES.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut w: Vec<f64> = (0..SITES.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        w.sort_by(|a, b| b.total_cmp(a));
        let s: f64 = w.iter().sum();
        order.into_iter().zip(w).map(|(i, c)| (SITES[i].to_string(), c / s)).collect::<Vec<_>>()
    }))
        .prop_map(move |(t, ranked)| Prediction::from_ranked(&format!("{id:03}"), SITES[t], ranked))
}

fn predictions(n: usize) -> impl Strategy<Value = Vec<Prediction>> {
    (0..n).map(prediction).collect::<Vec<_>>()
}

fn sorted(mut p: Vec<Prediction>) -> Vec<Prediction> {
    p.sort_by_key(|x| x.key());
    p
}

fn column_matrix(labels: &[usize], values: &[f64]) -> FeatureMatrix {
    FeatureMatrix::new(
        FeatureSet::Kfp,
        vec!["x".into()],
        values.iter().map(|&v| vec![v]).collect(),
        labels.iter().map(|&l| SITES[l].to_string()).collect(),
        (0..labels.len()).map(|i| format!("{i:03}")).collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fp_total_equals_fn_total_and_micro_f1_is_tpr(preds in predictions(40)) {
        let s = site_metrics("x", &preds).unwrap();
        let fp: usize = s.per_site.iter().map(|m| m.fp).sum();
        let fn_: usize = s.per_site.iter().map(|m| m.fn_).sum();
        prop_assert_eq!(fp, fn_);
        let t = s.totals();
        prop_assert_eq!(t.f1, s.tpr);
        prop_assert!((s.fpr - (1.0 - s.tpr)).abs() < 1e-12);
    }

    #[test]
    fn venn_regions_sum_to_one(a in predictions(30), b in predictions(30), c in predictions(30)) {
        // give all three lists the same true labels
        let b: Vec<Prediction> = b.into_iter().zip(&a).map(|(mut p, q)| { p.true_site = q.true_site.clone(); p }).collect();
        let c: Vec<Prediction> = c.into_iter().zip(&a).map(|(mut p, q)| { p.true_site = q.true_site.clone(); p }).collect();
        let r = error_overlap([(ClassifierId::Cumul, &a), (ClassifierId::Kfp, &b), (ClassifierId::Knn, &c)]).unwrap();
        for v in [&r.erred, &r.same_guess] {
            if v.total > 0 {
                let s: f64 = v.regions.values().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            prop_assert_eq!(v.regions.len(), 7);
        }
    }

    #[test]
    fn ensemble_is_deterministic_and_picks_a_base_guess(a in predictions(25), b in predictions(25), seed in any::<u64>()) {
        let b: Vec<Prediction> = b.into_iter().zip(&a).map(|(mut p, q)| { p.true_site = q.true_site.clone(); p }).collect();
        let base = [(ClassifierId::Cumul, &a[..]), (ClassifierId::Kfp, &b[..])];
        for strategy in [Combine::Random, Combine::MaxConf, Combine::P1p2] {
            let e1 = ensemble(&base, strategy, seed).unwrap();
            let e2 = ensemble(&base, strategy, seed).unwrap();
            prop_assert_eq!(&e1, &e2);
            let (sa, sb) = (sorted(a.clone()), sorted(b.clone()));
            for (i, p) in e1.iter().enumerate() {
                prop_assert!(p.predicted() == sa[i].predicted() || p.predicted() == sb[i].predicted());
            }
        }
    }

    #[test]
    fn symmetry_fraction_in_unit_interval_and_matches_graph(preds in predictions(40)) {
        let s = symmetry_fraction(&preds);
        prop_assert!((0.0..=1.0).contains(&s.fraction));
        let g = build_graph(&preds);
        prop_assert_eq!(g.total_weight(), s.total_misclassifications);
        prop_assert!((g.symmetric_weight_fraction() - s.fraction).abs() < 1e-12);
    }

    #[test]
    fn communities_cover_every_node(preds in predictions(40), seed in any::<u64>()) {
        let g = build_graph(&preds);
        let c = detect_communities(&g, 1.0, seed).unwrap();
        let covered: BTreeSet<String> = c.keys().cloned().collect();
        prop_assert_eq!(&covered, &g.nodes);
        prop_assert_eq!(c, detect_communities(&g, 1.0, seed).unwrap());
    }

    #[test]
    fn graph_round_trips_through_both_formats(preds in predictions(30)) {
        let g = build_graph(&preds);
        for f in [GraphFormat::Graphml, GraphFormat::Dot] {
            let back = parse_graph(&export_graph(&g, f), f).unwrap();
            prop_assert_eq!(&back.nodes, &g.nodes);
            prop_assert_eq!(&back.edges, &g.edges);
        }
    }

    #[test]
    fn relative_difference_bounded_and_antisymmetric(x in 0.0f64..1e6, y in 0.0f64..1e6) {
        let d = relative_difference(x, y).unwrap();
        prop_assert!((-2.0..=2.0).contains(&d));
        prop_assert!((d + relative_difference(y, x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rank_features_is_scale_free(
        labels in proptest::collection::vec(0usize..3, 30),
        values in proptest::collection::vec(-100.0f64..100.0, 30),
        scale in 0.01f64..100.0,
    ) {
        let m = column_matrix(&labels, &values);
        let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
        let m2 = column_matrix(&labels, &scaled);
        let (a, b) = (rank_features(&m).unwrap(), rank_features(&m2).unwrap());
        prop_assert!((a[0].rel_diff - b[0].rel_diff).abs() < 1e-6);
    }

    #[test]
    fn zscores_are_affine_invariant(
        labels in proptest::collection::vec(0usize..3, 30),
        values in proptest::collection::vec(-100.0f64..100.0, 30),
        a in 0.1f64..10.0,
        b in -1e3f64..1e3,
        preds in predictions(30),
    ) {
        let preds: Vec<Prediction> = preds.into_iter().zip(&labels).map(|(mut p, &l)| { p.true_site = SITES[l].into(); p }).collect();
        let m = column_matrix(&labels, &values);
        let moved: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        let m2 = column_matrix(&labels, &moved);
        let r1 = zscore_report(&m, "x", &[&preds]).unwrap();
        let r2 = zscore_report(&m2, "x", &[&preds]).unwrap();
        for (x, y) in r1.records.iter().zip(&r2.records) {
            prop_assert!((x.z - y.z).abs() < 1e-6);
            prop_assert_eq!(x.correctly_classified, y.correctly_classified);
        }
    }

    #[test]
    fn tukey_counts_match_quartile_oracle_and_ignore_shifts(
        labels in proptest::collection::vec(0usize..2, 40),
        ints in proptest::collection::vec(-50i32..50, 40),
        shift in -1000i32..1000,
        preds in predictions(40),
    ) {
        // integer data keeps quartiles and fences exact under shifts
        let values: Vec<f64> = ints.iter().map(|&v| v as f64).collect();
        let preds: Vec<Prediction> = preds.into_iter().zip(&labels).map(|(mut p, &l)| { p.true_site = SITES[l].into(); p }).collect();
        let r = tukey_outlier_report(&column_matrix(&labels, &values), "x", &[&preds], 1.5).unwrap();
        let mut want = 0;
        for site in 0..2 {
            let mut v: Vec<f64> = values.iter().zip(&labels).filter(|(_, &l)| l == site).map(|(x, _)| *x).collect();
            if v.len() < 4 {
                continue;
            }
            v.sort_by(f64::total_cmp);
            let (q1, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75));
            let iqr = q3 - q1;
            want += v.iter().filter(|&&x| x < q1 - 1.5 * iqr || x > q3 + 1.5 * iqr).count();
        }
        prop_assert_eq!(r.outliers, want);
        prop_assert_eq!(r.outliers, r.misclassified_outliers + r.correct_outliers);
        let moved: Vec<f64> = values.iter().map(|v| v + shift as f64).collect();
        let r2 = tukey_outlier_report(&column_matrix(&labels, &moved), "x", &[&preds], 1.5).unwrap();
        prop_assert_eq!(r.outliers, r2.outliers);
    }

    #[test]
    fn folds_are_stratified(counts in proptest::collection::vec(3usize..20, 1..5), k in 2usize..6, seed in any::<u64>()) {
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for (s, &n) in counts.iter().enumerate() {
            for i in 0..n {
                labels.push(SITES[s].to_string());
                ids.push(format!("{i:03}"));
            }
        }
        prop_assume!(counts.iter().all(|&n| n >= k));
        let f = fold_assignment(&labels, &ids, k, seed).unwrap();
        for s in 0..counts.len() {
            let mut per = vec![0usize; k];
            for (i, l) in labels.iter().enumerate() {
                if l == SITES[s] {
                    per[f[i]] += 1;
                }
            }
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn trace_text_round_trips(sizes in proptest::collection::vec((any::<bool>(), 1u32..2000, 0u32..1000), 1..50)) {
        let mut time = 0.0;
        let packets: Vec<Packet> = sizes
            .iter()
            .map(|&(out, size, gap)| {
                time += gap as f64 / 1000.0;
                Packet { time, direction: if out { Direction::Out } else { Direction::In }, size }
            })
            .collect();
        let first = packets[0].time;
        let t = PacketTrace {
            site_id: "s".into(),
            instance_id: "0".into(),
            packets: packets.iter().map(|p| Packet { time: p.time - first, ..*p }).collect(),
        };
        let back = parse_trace(&t.to_trace_text(), "s", "0").unwrap();
        prop_assert_eq!(back, t);
    }
}

fn world(traces_per_site: &[(usize, Vec<u32>)]) -> Dataset {
    let mut traces = Vec::new();
    for (s, (_, sizes)) in traces_per_site.iter().enumerate() {
        for (i, &size) in sizes.iter().enumerate() {
            traces.push(PacketTrace {
                site_id: SITES[s].into(),
                instance_id: format!("{i:03}"),
                packets: vec![
                    Packet { time: 0.0, direction: Direction::Out, size: 600 },
                    Packet { time: 0.01, direction: Direction::In, size },
                ],
            });
        }
    }
    Dataset::from_traces(traces)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sanitize_is_idempotent_and_conserves_traces(
        sites in proptest::collection::vec((Just(0usize), proptest::collection::vec(100u32..3000, 2..15)), 1..5),
        keep in 2usize..8,
    ) {
        let d = world(&sites);
        let cfg = SanitizeConfig { instances_per_site: keep, ..Default::default() };
        match sanitize(&d, &cfg) {
            Ok((once, report)) => {
                prop_assert_eq!(once.num_traces() + report.removed_traces(), d.num_traces());
                prop_assert!(once.sites.values().all(|v| v.len() == keep));
                let (twice, r2) = sanitize(&once, &cfg).unwrap();
                prop_assert_eq!(&twice, &once);
                prop_assert_eq!(r2.removed_traces(), 0);
            }
            Err(e) => prop_assert!(matches!(e, onionprint::trace_store::DatasetError::EmptyWorld)),
        }
    }
}
