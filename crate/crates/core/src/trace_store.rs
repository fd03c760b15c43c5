//! Packet traces, on-disk datasets, and closed-world sanitization.
//!
//! A trace file holds one packet per line as `t<TAB>s`: `t` is seconds since
//! the capture started, `s` is the signed packet size in bytes with positive
//! values for client-to-guard (outgoing) packets. A dataset lives under one
//! root directory, one subdirectory per site:
//!
//! ```text
//! <root>/<site_id>/<instance_id>.trace
//! <root>/<site_id>/profile.json        optional, {"source_hash": "..."}
//! <root>/<site_id>/profile/<visit>.json optional crawl records (see sitefeat)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::stats;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TraceError {
    #[error("line {line}: malformed packet line {content:?}")]
    Malformed { line: usize, content: String },
    #[error("line {line}: zero-size packet")]
    ZeroSize { line: usize },
    #[error("line {line}: timestamp goes backwards")]
    NonMonotonic { line: usize },
    #[error("empty trace")]
    Empty,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid sanitization config: {0}")]
    InvalidConfig(String),
    #[error("empty world: no site survived sanitization")]
    EmptyWorld,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Client to guard.
    Out,
    /// Guard to client.
    In,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub time: f64,
    pub direction: Direction,
    pub size: u32,
}

impl Packet {
    /// Size with the file sign convention: positive outgoing, negative incoming.
    pub fn signed_size(&self) -> i64 {
        match self.direction {
            Direction::Out => self.size as i64,
            Direction::In => -(self.size as i64),
        }
    }
}

/// One page visit. Timestamps start at 0 and never decrease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketTrace {
    pub site_id: String,
    pub instance_id: String,
    pub packets: Vec<Packet>,
}

impl PacketTrace {
    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn count(&self, dir: Direction) -> usize {
        self.packets.iter().filter(|p| p.direction == dir).count()
    }

    pub fn bytes(&self, dir: Direction) -> u64 {
        self.packets
            .iter()
            .filter(|p| p.direction == dir)
            .map(|p| p.size as u64)
            .sum()
    }

    pub fn incoming_bytes(&self) -> u64 {
        self.bytes(Direction::In)
    }

    /// Timestamp of the last packet.
    pub fn duration(&self) -> f64 {
        self.packets.last().map_or(0.0, |p| p.time)
    }

    /// Render in the trace file format. Re-parsing the output reproduces the trace.
    pub fn to_trace_text(&self) -> String {
        let mut out = String::with_capacity(self.packets.len() * 12);
        for p in &self.packets {
            out.push_str(&format!("{}\t{}\n", p.time, p.signed_size()));
        }
        out
    }
}

/// Parse trace file content. Blank lines are skipped; timestamps are rebased
/// so the first packet is at 0.
pub fn parse_trace(content: &str, site_id: &str, instance_id: &str) -> Result<PacketTrace, TraceError> {
    let mut packets = Vec::new();
    let mut origin = None;
    let mut last = f64::NEG_INFINITY;
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        let text = raw.trim();
        if text.is_empty() {
            continue;
        }
        let malformed = || TraceError::Malformed { line, content: raw.to_string() };
        let (t, s) = text.split_once('\t').ok_or_else(malformed)?;
        let t: f64 = t.trim().parse().map_err(|_| malformed())?;
        let s: i64 = s.trim().parse().map_err(|_| malformed())?;
        if !t.is_finite() || t < 0.0 {
            return Err(malformed());
        }
        if s == 0 {
            return Err(TraceError::ZeroSize { line });
        }
        let size = u32::try_from(s.unsigned_abs()).map_err(|_| malformed())?;
        if t < last {
            return Err(TraceError::NonMonotonic { line });
        }
        last = t;
        let t0 = *origin.get_or_insert(t);
        packets.push(Packet {
            time: t - t0,
            direction: if s > 0 { Direction::Out } else { Direction::In },
            size,
        });
    }
    if packets.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(PacketTrace { site_id: site_id.to_string(), instance_id: instance_id.to_string(), packets })
}

/// A visit that could not be turned into a usable trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedVisit {
    pub site_id: String,
    pub instance_id: String,
    pub reason: String,
}

/// Traces grouped by site. Within a site, traces are kept in instance-id
/// order, which is the chronological capture order for zero-padded names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sites: BTreeMap<String, Vec<PacketTrace>>,
    /// Source-page hash per site, used for duplicate detection.
    pub source_hashes: BTreeMap<String, String>,
    pub failed: Vec<FailedVisit>,
}

impl Dataset {
    pub fn from_traces(traces: impl IntoIterator<Item = PacketTrace>) -> Self {
        let mut d = Dataset::default();
        for t in traces {
            d.sites.entry(t.site_id.clone()).or_default().push(t);
        }
        for v in d.sites.values_mut() {
            v.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        }
        d
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn num_traces(&self) -> usize {
        self.sites.values().map(Vec::len).sum()
    }

    /// All traces, ordered by (site_id, instance_id).
    pub fn traces(&self) -> impl Iterator<Item = &PacketTrace> {
        self.sites.values().flatten()
    }

    /// Median total incoming bytes per site.
    pub fn median_incoming_bytes(&self) -> BTreeMap<String, f64> {
        self.sites
            .iter()
            .map(|(s, ts)| {
                let totals: Vec<f64> = ts.iter().map(|t| t.incoming_bytes() as f64).collect();
                (s.clone(), stats::median(&totals))
            })
            .collect()
    }

    /// Keep only the named sites.
    pub fn restrict_to(&self, keep: &BTreeSet<String>) -> Dataset {
        Dataset {
            sites: self.sites.iter().filter(|(s, _)| keep.contains(*s)).map(|(s, v)| (s.clone(), v.clone())).collect(),
            source_hashes: self
                .source_hashes
                .iter()
                .filter(|(s, _)| keep.contains(*s))
                .map(|(s, h)| (s.clone(), h.clone()))
                .collect(),
            failed: self.failed.iter().filter(|f| keep.contains(&f.site_id)).cloned().collect(),
        }
    }
}

#[derive(Deserialize)]
struct SiteMeta {
    #[serde(default)]
    source_hash: Option<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Load every `<site>/<instance>.trace` under `root`. Unparseable traces are
/// recorded in [`Dataset::failed`] rather than aborting the load.
pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let mut site_dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if path.is_dir() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                site_dirs.push((name.to_string(), path));
            }
        }
    }
    site_dirs.sort();

    let mut dataset = Dataset::default();
    for (site, dir) in site_dirs {
        let mut files = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.is_file() && path.extension().is_some_and(|e| e == "trace") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    files.push((stem.to_string(), path));
                }
            }
        }
        files.sort();
        let parsed: Vec<Result<PacketTrace, FailedVisit>> = files
            .par_iter()
            .map(|(inst, path)| {
                let fail = |reason: String| FailedVisit { site_id: site.clone(), instance_id: inst.clone(), reason };
                let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
                let text = String::from_utf8(bytes).map_err(|e| fail(e.to_string()))?;
                parse_trace(&text, &site, inst).map_err(|e| fail(e.to_string()))
            })
            .collect();
        let traces = dataset.sites.entry(site.clone()).or_default();
        for r in parsed {
            match r {
                Ok(t) => traces.push(t),
                Err(f) => {
                    log::warn!("failed visit {}/{}: {}", f.site_id, f.instance_id, f.reason);
                    dataset.failed.push(f);
                }
            }
        }

        let meta_path = dir.join("profile.json");
        if meta_path.is_file() {
            let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
            match serde_json::from_str::<SiteMeta>(&text) {
                Ok(SiteMeta { source_hash: Some(h) }) => {
                    dataset.source_hashes.insert(site.clone(), h);
                }
                Ok(_) => {}
                Err(e) => log::warn!("ignoring unreadable {}: {e}", meta_path.display()),
            }
        }
    }
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SanitizeConfig {
    pub instances_per_site: usize,
    /// Lower band edge as a fraction of the site median of incoming bytes.
    pub outlier_low: f64,
    /// Upper band edge as a multiple of the site median of incoming bytes.
    pub outlier_high: f64,
}

impl Default for SanitizeConfig {
    fn default() -> Self {
        SanitizeConfig { instances_per_site: 70, outlier_low: 0.2, outlier_high: 2.0 }
    }
}

/// Removal counters. `removed_duplicate_sites` and `removed_threshold_sites`
/// count sites; the matching `*_traces` fields count the traces those sites
/// held, so that [`SanitizationReport::removed_traces`] balances the totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizationReport {
    pub removed_failed: usize,
    pub removed_outliers: usize,
    pub removed_duplicate_sites: usize,
    pub removed_threshold_sites: usize,
    pub removed_extra_instances: usize,
    pub removed_duplicate_traces: usize,
    pub removed_threshold_traces: usize,
}

impl SanitizationReport {
    pub fn removed_traces(&self) -> usize {
        self.removed_failed
            + self.removed_outliers
            + self.removed_duplicate_traces
            + self.removed_threshold_traces
            + self.removed_extra_instances
    }
}

/// Indices of traces whose incoming total falls outside the band around the
/// median of `totals`.
fn outlier_indices(totals: &[f64], low: f64, high: f64) -> Vec<usize> {
    let med = stats::median(totals);
    let (lo, hi) = (low * med, high * med);
    totals.iter().enumerate().filter(|(_, &x)| x < lo || x > hi).map(|(i, _)| i).collect()
}

/// Produce a balanced closed world: drop failed and empty visits, per-site
/// size outliers, duplicate sites and under-populated sites, then truncate
/// every survivor to exactly `instances_per_site` traces.
///
/// Truncation keeps the earliest traces. If the kept window's own median
/// would flag one of its members as an outlier, that member is dropped and
/// the window refilled from later traces; this makes the result a fixed
/// point of `sanitize`.
pub fn sanitize(d: &Dataset, cfg: &SanitizeConfig) -> Result<(Dataset, SanitizationReport), DatasetError> {
    if cfg.instances_per_site < 2 {
        return Err(DatasetError::InvalidConfig("instances_per_site must be at least 2".into()));
    }
    if !(cfg.outlier_low >= 0.0 && cfg.outlier_high >= cfg.outlier_low && cfg.outlier_high.is_finite()) {
        return Err(DatasetError::InvalidConfig(format!(
            "outlier band [{}, {}] is not valid",
            cfg.outlier_low, cfg.outlier_high
        )));
    }
    let mut report = SanitizationReport { removed_failed: d.failed.len(), ..Default::default() };

    // (1) empty traces, (2) outliers against the full-site median
    let mut sites: BTreeMap<String, Vec<PacketTrace>> = BTreeMap::new();
    for (site, traces) in &d.sites {
        let mut kept: Vec<PacketTrace> = traces.iter().filter(|t| !t.is_empty()).cloned().collect();
        report.removed_failed += traces.len() - kept.len();
        kept.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let totals: Vec<f64> = kept.iter().map(|t| t.incoming_bytes() as f64).collect();
        let drop = outlier_indices(&totals, cfg.outlier_low, cfg.outlier_high);
        report.removed_outliers += drop.len();
        let drop: BTreeSet<usize> = drop.into_iter().collect();
        let kept = kept.into_iter().enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, t)| t).collect();
        sites.insert(site.clone(), kept);
    }

    // (3) duplicates: keep the lexicographically smallest site per hash
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    let mut duplicates = Vec::new();
    for site in sites.keys() {
        if let Some(h) = d.source_hashes.get(site) {
            if seen.contains_key(h.as_str()) {
                duplicates.push(site.clone());
            } else {
                seen.insert(h, site);
            }
        }
    }
    for site in duplicates {
        let removed = sites.remove(&site).unwrap_or_default();
        report.removed_duplicate_sites += 1;
        report.removed_duplicate_traces += removed.len();
    }

    // (4) threshold and (5) truncation
    let n = cfg.instances_per_site;
    let mut out = BTreeMap::new();
    for (site, mut pool) in sites {
        loop {
            if pool.len() < n {
                report.removed_threshold_sites += 1;
                report.removed_threshold_traces += pool.len();
                break;
            }
            let totals: Vec<f64> = pool[..n].iter().map(|t| t.incoming_bytes() as f64).collect();
            let drop = outlier_indices(&totals, cfg.outlier_low, cfg.outlier_high);
            if drop.is_empty() {
                report.removed_extra_instances += pool.len() - n;
                pool.truncate(n);
                out.insert(site, pool);
                break;
            }
            report.removed_outliers += drop.len();
            for i in drop.into_iter().rev() {
                pool.remove(i);
            }
        }
    }
    if out.is_empty() {
        return Err(DatasetError::EmptyWorld);
    }
    let source_hashes = d.source_hashes.iter().filter(|(s, _)| out.contains_key(*s)).map(|(s, h)| (s.clone(), h.clone())).collect();
    Ok((Dataset { sites: out, source_hashes, failed: Vec::new() }, report))
}
