//! Site-level (web-design) features aggregated from per-visit crawl
//! records, and a random-forest regression of fingerprintability on them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::forest::{ForestParams, ForestRegressor, MaxFeatures, TreeParams};
use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum SiteError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("site {0} has no crawl records")]
    NoRecords(String),
    #[error("after filtering, {high} high and {low} low sites remain; need at least 2 of each")]
    OneSided { high: usize, low: usize },
    #[error("need at least {need} sites, have {have}")]
    TooFewSites { need: usize, have: usize },
    #[error("invalid site-feature config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub url: String,
    pub header_size: u64,
    pub body_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub content_type: String,
    pub content_length: u64,
    pub header_size: u64,
    pub has_location: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HttpEvent {
    Req,
    Resp,
}

/// Everything recorded about one visit to a site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrawlRecord {
    pub requests: Vec<HttpRequest>,
    pub responses: Vec<HttpResponse>,
    pub html_source_size: u64,
    pub page_load_time_ms: f64,
    pub screenshot_size: u64,
    #[serde(default)]
    pub generator_meta: Option<String>,
    pub events: Vec<HttpEvent>,
}

impl CrawlRecord {
    /// Sum of response sizes, headers included.
    pub fn page_weight(&self) -> u64 {
        self.responses.iter().map(|r| r.header_size + r.content_length).sum()
    }

    /// Sum of request sizes, headers included.
    pub fn total_request_size(&self) -> u64 {
        self.requests.iter().map(|r| r.header_size + r.body_size).sum()
    }

    /// Maximal runs of requests or responses in the event sequence.
    pub fn waterfall_phases(&self) -> usize {
        if self.events.is_empty() {
            return 0;
        }
        1 + self.events.windows(2).filter(|w| w[0] != w[1]).count()
    }

    pub fn domains(&self) -> usize {
        self.requests
            .iter()
            .filter_map(|r| url::Url::parse(&r.url).ok()?.host_str().map(str::to_ascii_lowercase))
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// URL pattern lists standing in for ad and tracker filter lists. A pattern
/// starting with `|` must match the start of the URL; any other pattern
/// matches as a substring. Matching ignores case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdRules {
    pub advertisement: Vec<String>,
    pub tracking: Vec<String>,
}

impl Default for AdRules {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        AdRules {
            advertisement: v(&["/ads/", "/adserver", "banner", "doubleclick", "adsystem", "/advert"]),
            tracking: v(&["/analytics", "piwik", "matomo", "/track", "google-analytics", "/pixel", "/beacon"]),
        }
    }
}

fn rule_matches(rule: &str, url: &str) -> bool {
    let url = url.to_ascii_lowercase();
    match rule.strip_prefix('|') {
        Some(prefix) => url.starts_with(&prefix.to_ascii_lowercase()),
        None => url.contains(&rule.to_ascii_lowercase()),
    }
}

fn any_request_matches(rec: &CrawlRecord, rules: &[String]) -> bool {
    rec.requests.iter().any(|r| rules.iter().any(|rule| rule_matches(rule, &r.url)))
}

/// CMS names recognized in the generator meta tag.
pub const CMS_NAMES: [&str; 10] =
    ["Django", "Dokuwiki", "Drupal", "Joomla", "MediaWiki", "OnionMail", "phpSQLiteCMS", "vBulletin", "WooCommerce", "Wordpress"];

pub const CONTENT_CATEGORIES: [&str; 8] = ["audio", "fonts", "html", "images", "other", "scripts", "stylesheets", "videos"];

pub fn content_category(content_type: &str) -> &'static str {
    let t = content_type.split(';').next().unwrap_or("").trim().to_ascii_lowercase();
    if t.starts_with("audio/") {
        "audio"
    } else if t.starts_with("video/") {
        "videos"
    } else if t.starts_with("image/") {
        "images"
    } else if t.starts_with("font/") || t.contains("font") {
        "fonts"
    } else if t == "text/html" || t == "application/xhtml+xml" {
        "html"
    } else if t == "text/css" {
        "stylesheets"
    } else if t.contains("javascript") || t.contains("ecmascript") {
        "scripts"
    } else {
        "other"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Aggregate {
    Median,
    Mode,
}

/// Feature names in profile order, with their aggregation.
fn feature_table() -> Vec<(String, Aggregate)> {
    use Aggregate::*;
    let mut t: Vec<(String, Aggregate)> = vec![
        ("n_http_requests".into(), Median),
        ("n_http_responses".into(), Median),
        ("has_advertisement".into(), Mode),
        ("has_tracking".into(), Mode),
        ("html_source_size".into(), Median),
        ("page_load_time".into(), Median),
    ];
    for cms in CMS_NAMES {
        t.push((format!("made_with_{}", cms.to_ascii_lowercase()), Mode));
    }
    t.push(("made_with_cms".into(), Mode));
    for c in CONTENT_CATEGORIES {
        t.push((format!("n_{c}"), Median));
    }
    for name in ["n_domains", "n_redirections", "n_empty_content", "n_waterfall_phases", "screenshot_size", "page_weight", "total_request_size"] {
        t.push((name.into(), Median));
    }
    t
}

pub fn site_feature_names() -> Vec<String> {
    feature_table().into_iter().map(|(n, _)| n).collect()
}

/// Names of the features that directly measure how big a site is.
pub const SIZE_FEATURES: [&str; 4] = ["html_source_size", "page_weight", "total_request_size", "screenshot_size"];

/// One visit's raw feature values, in [`site_feature_names`] order.
pub fn visit_features(rec: &CrawlRecord, rules: &AdRules) -> Vec<f64> {
    let b = |x: bool| if x { 1.0 } else { 0.0 };
    let generator = rec.generator_meta.as_deref().unwrap_or("").to_ascii_lowercase();
    let cms: Vec<bool> = CMS_NAMES.iter().map(|c| generator.contains(&c.to_ascii_lowercase())).collect();
    let mut cats: BTreeMap<&str, usize> = CONTENT_CATEGORIES.iter().map(|c| (*c, 0)).collect();
    for r in &rec.responses {
        *cats.get_mut(content_category(&r.content_type)).unwrap() += 1;
    }
    let mut v = vec![
        rec.requests.len() as f64,
        rec.responses.len() as f64,
        b(any_request_matches(rec, &rules.advertisement)),
        b(any_request_matches(rec, &rules.tracking)),
        rec.html_source_size as f64,
        rec.page_load_time_ms,
    ];
    v.extend(cms.iter().map(|&x| b(x)));
    v.push(b(cms.iter().any(|&x| x)));
    v.extend(CONTENT_CATEGORIES.iter().map(|c| cats[c] as f64));
    v.extend([
        rec.domains() as f64,
        rec.responses.iter().filter(|r| r.has_location).count() as f64,
        rec.responses.iter().filter(|r| r.content_length == 0).count() as f64,
        rec.waterfall_phases() as f64,
        rec.screenshot_size as f64,
        rec.page_weight() as f64,
        rec.total_request_size() as f64,
    ]);
    v
}

/// Most frequent value; ties go to the smallest.
fn mode(xs: &[f64]) -> f64 {
    let mut counts: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for &x in xs {
        counts.entry(x.to_bits()).or_insert((x, 0)).1 += 1;
    }
    let mut best: Option<(f64, usize)> = None;
    for (x, n) in counts.into_values() {
        if best.is_none_or(|(bx, bn)| n > bn || (n == bn && x < bx)) {
            best = Some((x, n));
        }
    }
    best.map_or(0.0, |b| b.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub visits: usize,
    /// In [`site_feature_names`] order.
    pub values: Vec<f64>,
    /// Population std of page weight across visits.
    pub page_weight_std: f64,
}

impl SiteProfile {
    pub fn get(&self, name: &str) -> Option<f64> {
        site_feature_names().iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Median of quantitative features and mode of binary ones across visits.
pub fn aggregate_site_profile(site: &str, records: &[CrawlRecord], rules: &AdRules) -> Result<SiteProfile, SiteError> {
    if records.is_empty() {
        return Err(SiteError::NoRecords(site.to_string()));
    }
    let per_visit: Vec<Vec<f64>> = records.iter().map(|r| visit_features(r, rules)).collect();
    let values = feature_table()
        .iter()
        .enumerate()
        .map(|(j, (_, agg))| {
            let col: Vec<f64> = per_visit.iter().map(|v| v[j]).collect();
            match agg {
                Aggregate::Median => stats::median(&col),
                Aggregate::Mode => mode(&col),
            }
        })
        .collect();
    let weights: Vec<f64> = records.iter().map(|r| r.page_weight() as f64).collect();
    Ok(SiteProfile { visits: records.len(), values, page_weight_std: stats::std_dev(&weights) })
}

/// Crawl records under `<root>/<site>/profile/*.json`, visits in file-name
/// order. Sites without a profile directory are absent from the result.
pub fn load_crawl_records(root: &Path) -> Result<BTreeMap<String, Vec<CrawlRecord>>, SiteError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SiteError::Io { path, source }
    };
    let mut out = BTreeMap::new();
    let mut sites: Vec<PathBuf> =
        fs::read_dir(root).map_err(io(root))?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    sites.sort();
    for dir in sites {
        let pdir = dir.join("profile");
        if !pdir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&pdir)
            .map_err(io(&pdir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut records = Vec::with_capacity(files.len());
        for f in files {
            let text = fs::read_to_string(&f).map_err(io(&f))?;
            records.push(serde_json::from_str(&text).map_err(|source| SiteError::Json { path: f.clone(), source })?);
        }
        let site = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        out.insert(site, records);
    }
    Ok(out)
}

pub fn write_profiles_csv<W: std::io::Write>(profiles: &BTreeMap<String, SiteProfile>, w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["site".to_string()];
    header.extend(site_feature_names());
    header.push("page_weight_std".into());
    wr.write_record(&header)?;
    for (site, p) in profiles {
        let mut row = vec![site.clone()];
        row.extend(p.values.iter().map(|v| v.to_string()));
        row.push(p.page_weight_std.to_string());
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub trees: usize,
    pub mid_low: f64,
    pub mid_high: f64,
    pub threshold: f64,
    pub min_leaf: usize,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig { trees: 100, mid_low: 0.33, mid_high: 0.66, threshold: 0.5, min_leaf: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceLog {
    pub middle_removed: Vec<String>,
    pub high_before: usize,
    pub low_before: usize,
    pub downsampled_removed: Vec<String>,
    pub training_sites: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub site: String,
    pub actual: f64,
    /// Out-of-bag prediction; `None` when every tree saw the site.
    pub predicted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    /// `(feature, importance)`, most important first.
    pub importances: Vec<(String, f64)>,
    pub predictions: Vec<ScorePair>,
    pub balance: BalanceLog,
}

impl RegressionReport {
    pub fn importance_of(&self, names: &[&str]) -> f64 {
        self.importances.iter().filter(|(n, _)| names.contains(&n.as_str())).map(|(_, v)| v).sum()
    }

    pub fn write_importance_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["feature", "importance"])?;
        for (f, v) in &self.importances {
            wr.write_record([f.as_str(), &v.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Drop the middle tier, balance high against low sites by seeded
/// downsampling, and fit a regression forest of score on profile.
pub fn fingerprintability_regressor(
    profiles: &BTreeMap<String, SiteProfile>,
    scores: &BTreeMap<String, f64>,
    cfg: &RegressorConfig,
    seed: u64,
) -> Result<RegressionReport, SiteError> {
    if cfg.trees < 1 || cfg.mid_low > cfg.mid_high {
        return Err(SiteError::InvalidConfig("need trees >= 1 and mid_low <= mid_high".into()));
    }
    let mut middle_removed = Vec::new();
    let (mut high, mut low) = (Vec::new(), Vec::new());
    for (site, &s) in scores {
        if !profiles.contains_key(site) {
            log::warn!("site {site} has a score but no crawl profile; skipped");
            continue;
        }
        if s > cfg.mid_low && s < cfg.mid_high {
            middle_removed.push(site.clone());
        } else if s >= cfg.threshold {
            high.push(site.clone());
        } else {
            low.push(site.clone());
        }
    }
    if high.len() < 2 || low.len() < 2 {
        return Err(SiteError::OneSided { high: high.len(), low: low.len() });
    }
    let (high_before, low_before) = (high.len(), low.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = high.len().min(low.len());
    let mut downsampled_removed = Vec::new();
    for side in [&mut high, &mut low] {
        if side.len() > target {
            let mut keep: Vec<usize> = sample(&mut rng, side.len(), target).into_vec();
            keep.sort_unstable();
            let kept: Vec<String> = keep.iter().map(|&i| side[i].clone()).collect();
            downsampled_removed.extend(side.iter().filter(|s| !kept.contains(s)).cloned());
            *side = kept;
        }
    }
    let mut training_sites: Vec<String> = high.into_iter().chain(low).collect();
    training_sites.sort();
    let x: Vec<Vec<f64>> = training_sites.iter().map(|s| profiles[s].values.clone()).collect();
    let y: Vec<f64> = training_sites.iter().map(|s| scores[s]).collect();
    let params = ForestParams {
        trees: cfg.trees,
        tree: TreeParams { max_depth: None, min_leaf: cfg.min_leaf.max(1), max_features: MaxFeatures::Third },
        bootstrap: true,
        seed: rng_seed(&mut rng),
    };
    let forest = ForestRegressor::fit(&x, &y, &params);
    let mut importances: Vec<(String, f64)> = site_feature_names().into_iter().zip(forest.importance.iter().copied()).collect();
    importances.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let predictions = training_sites
        .iter()
        .zip(&y)
        .zip(&forest.oob)
        .map(|((s, &actual), &predicted)| ScorePair { site: s.clone(), actual, predicted })
        .collect();
    Ok(RegressionReport {
        importances,
        predictions,
        balance: BalanceLog { middle_removed, high_before, low_before, downsampled_removed, training_sites },
    })
}

fn rng_seed(rng: &mut ChaCha8Rng) -> u64 {
    use rand::Rng;
    rng.random()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopBottom {
    pub n: usize,
    pub top_sites: Vec<String>,
    pub bottom_sites: Vec<String>,
    pub median_total_size_top: f64,
    pub median_total_size_bottom: f64,
    pub median_normalized_std_top: f64,
    pub median_normalized_std_bottom: f64,
}

/// Size and dynamism of the `n` most and `n` least fingerprintable sites.
pub fn top_bottom_comparison(
    profiles: &BTreeMap<String, SiteProfile>,
    scores: &BTreeMap<String, f64>,
    n: usize,
) -> Result<TopBottom, SiteError> {
    let mut ranked: Vec<(&String, f64)> = scores.iter().filter(|(s, _)| profiles.contains_key(*s)).map(|(s, &v)| (s, v)).collect();
    if n == 0 || ranked.len() < 2 * n {
        return Err(SiteError::TooFewSites { need: 2 * n.max(1), have: ranked.len() });
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let top: Vec<String> = ranked[..n].iter().map(|(s, _)| (*s).clone()).collect();
    let bottom: Vec<String> = ranked[ranked.len() - n..].iter().map(|(s, _)| (*s).clone()).collect();
    let weight_idx = site_feature_names().iter().position(|f| f == "page_weight").expect("page_weight is a feature");
    let summarize = |sites: &[String]| {
        let sizes: Vec<f64> = sites.iter().map(|s| profiles[s].values[weight_idx]).collect();
        let norm: Vec<f64> = sites
            .iter()
            .map(|s| {
                let p = &profiles[s];
                let w = p.values[weight_idx];
                if w > 0.0 {
                    p.page_weight_std / w
                } else {
                    0.0
                }
            })
            .collect();
        (stats::median(&sizes), stats::median(&norm))
    };
    let (st, nt) = summarize(&top);
    let (sb, nb) = summarize(&bottom);
    Ok(TopBottom {
        n,
        top_sites: top,
        bottom_sites: bottom,
        median_total_size_top: st,
        median_total_size_bottom: sb,
        median_normalized_std_top: nt,
        median_normalized_std_bottom: nb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(requests: usize, weight: u64, generator: Option<&str>) -> CrawlRecord {
        CrawlRecord {
            requests: (0..requests)
                .map(|i| HttpRequest { url: format!("http://site{}.onion/r{i}", i % 2), header_size: 100, body_size: 0 })
                .collect(),
            responses: vec![HttpResponse {
                status: 200,
                content_type: "text/html; charset=utf-8".into(),
                content_length: weight,
                header_size: 0,
                has_location: false,
            }],
            html_source_size: weight,
            page_load_time_ms: 1000.0,
            screenshot_size: 5000,
            generator_meta: generator.map(String::from),
            events: vec![HttpEvent::Req, HttpEvent::Resp],
        }
    }

    #[test]
    fn medians_and_modes() {
        let recs = vec![record(10, 1, Some("WordPress 5.1")), record(12, 2, None), record(11, 3, Some("WordPress"))];
        let p = aggregate_site_profile("s", &recs, &AdRules::default()).unwrap();
        assert_eq!(p.get("n_http_requests"), Some(11.0));
        assert_eq!(p.get("made_with_wordpress"), Some(1.0));
        assert_eq!(p.get("made_with_cms"), Some(1.0));
        assert_eq!(p.get("made_with_drupal"), Some(0.0));
        assert_eq!(p.get("n_html"), Some(1.0));
        assert_eq!(p.get("n_domains"), Some(2.0));
        assert!(matches!(aggregate_site_profile("s", &[], &AdRules::default()), Err(SiteError::NoRecords(_))));
    }

    #[test]
    fn binary_mode_tie_prefers_false() {
        let recs = vec![record(1, 1, Some("Joomla")), record(1, 1, None)];
        let p = aggregate_site_profile("s", &recs, &AdRules::default()).unwrap();
        assert_eq!(p.get("made_with_joomla"), Some(0.0));
    }

    #[test]
    fn waterfall_phases_count_runs() {
        use HttpEvent::*;
        let mut r = record(1, 1, None);
        r.events = vec![Req, Req, Resp, Req, Resp];
        assert_eq!(r.waterfall_phases(), 4);
        r.events.clear();
        assert_eq!(r.waterfall_phases(), 0);
    }

    #[test]
    fn content_categories() {
        assert_eq!(content_category("image/png"), "images");
        assert_eq!(content_category("application/javascript"), "scripts");
        assert_eq!(content_category("text/css;charset=utf-8"), "stylesheets");
        assert_eq!(content_category("application/font-woff"), "fonts");
        assert_eq!(content_category("application/octet-stream"), "other");
    }

    #[test]
    fn ad_rules() {
        let rules = AdRules { advertisement: vec!["|http://ads.".into()], tracking: vec!["piwik".into()] };
        let mut r = record(0, 1, None);
        r.requests.push(HttpRequest { url: "http://ADS.example/x".into(), header_size: 1, body_size: 0 });
        r.requests.push(HttpRequest { url: "http://a.onion/Piwik.js".into(), header_size: 1, body_size: 0 });
        let v = visit_features(&r, &rules);
        let names = site_feature_names();
        let at = |n: &str| v[names.iter().position(|x| x == n).unwrap()];
        assert_eq!(at("has_advertisement"), 1.0);
        assert_eq!(at("has_tracking"), 1.0);
    }

    fn profile(weight: f64, noise: f64) -> SiteProfile {
        let names = site_feature_names();
        let values = names
            .iter()
            .enumerate()
            .map(|(i, n)| if SIZE_FEATURES.contains(&n.as_str()) { weight } else { (noise * (i as f64 + 1.0) * 7.3) % 11.0 })
            .collect();
        SiteProfile { visits: 1, values, page_weight_std: weight * 0.01 }
    }

    #[test]
    fn middle_tier_and_balancing() {
        let mut profiles = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for i in 0..30 {
            profiles.insert(format!("h{i:02}"), profile(1000.0 + i as f64, i as f64));
            scores.insert(format!("h{i:02}"), 0.9);
        }
        for i in 0..10 {
            profiles.insert(format!("l{i:02}"), profile(10.0 + i as f64, i as f64 + 0.5));
            scores.insert(format!("l{i:02}"), 0.1);
        }
        profiles.insert("mid".into(), profile(50.0, 0.0));
        scores.insert("mid".into(), 0.5);
        let r = fingerprintability_regressor(&profiles, &scores, &RegressorConfig::default(), 4).unwrap();
        assert_eq!(r.balance.middle_removed, vec!["mid".to_string()]);
        assert_eq!(r.balance.training_sites.len(), 20);
        assert_eq!(r.balance.downsampled_removed.len(), 20);
        let total: f64 = r.importances.iter().map(|(_, v)| v).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(r.importances.iter().all(|(_, v)| *v >= 0.0));
    }

    #[test]
    fn one_sided_rejected() {
        let mut profiles = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for i in 0..5 {
            profiles.insert(format!("s{i}"), profile(i as f64, 0.0));
            scores.insert(format!("s{i}"), 0.95);
        }
        assert!(matches!(
            fingerprintability_regressor(&profiles, &scores, &RegressorConfig::default(), 0),
            Err(SiteError::OneSided { high: 5, low: 0 })
        ));
    }

    #[test]
    fn top_bottom_ranks_by_score() {
        let mut profiles = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for i in 0..6 {
            profiles.insert(format!("s{i}"), profile(100.0 * (i + 1) as f64, 0.0));
            scores.insert(format!("s{i}"), i as f64 / 10.0);
        }
        let tb = top_bottom_comparison(&profiles, &scores, 2).unwrap();
        assert_eq!(tb.top_sites, vec!["s5".to_string(), "s4".to_string()]);
        assert_eq!(tb.median_total_size_top, 550.0);
        assert_eq!(tb.median_total_size_bottom, 150.0);
        assert!((tb.median_normalized_std_top - 0.01).abs() < 1e-12);
        assert!(matches!(top_bottom_comparison(&profiles, &scores, 4), Err(SiteError::TooFewSites { .. })));
    }
}
