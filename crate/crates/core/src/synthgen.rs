//! Deterministic synthetic worlds: packet traces plus matching crawl
//! records, with controllable site size, visit-to-visit dynamism, duplicate
//! sites and outlier visits.
//!
//! Each site draws a page structure (resources, their share of the bytes,
//! content types, CMS) from a seed keyed by its template, and draws visit
//! noise from a seed keyed by its id, so output does not depend on thread
//! scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::derive_seed;
use crate::sitefeat::{CrawlRecord, HttpEvent, HttpRequest, HttpResponse};
use crate::trace_store::{Dataset, Direction, Packet, PacketTrace};

pub const MTU_PAYLOAD: u64 = 1500;
pub const REQUEST_SIZE: u32 = 600;
/// One extra outgoing packet per this many incoming ones.
pub const IN_PER_OUT: usize = 40;
pub const PACKET_GAP: f64 = 0.005;
pub const OUTLIER_FACTOR: f64 = 5.0;
const RESPONSE_HEADER: u64 = 200;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub id: String,
    /// Mean total incoming bytes per visit.
    pub mean_bytes: f64,
    /// Relative std of the per-visit total.
    pub dynamism: f64,
    /// Sites with the same template share page structure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

impl SiteSpec {
    pub fn new(id: impl Into<String>, mean_bytes: f64, dynamism: f64) -> Self {
        SiteSpec { id: id.into(), mean_bytes, dynamism, template: None }
    }

    pub fn with_template(mut self, t: impl Into<String>) -> Self {
        self.template = Some(t.into());
        self
    }

    fn structure_key(&self) -> &str {
        self.template.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseSizes {
    pub min_resources: usize,
    pub max_resources: usize,
}

impl Default for ResponseSizes {
    fn default() -> Self {
        ResponseSizes { min_resources: 3, max_resources: 12 }
    }
}

/// Override for the smallest sites of a generated world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallSites {
    pub count: usize,
    pub dynamism: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    /// Sites generated when `sites` is empty: `site000`, `site001`, ... with
    /// means `base_bytes * size_ratio^i`.
    pub n_sites: usize,
    pub base_bytes: f64,
    pub size_ratio: f64,
    pub dynamism: f64,
    /// The first `confusable_pairs` generated sites each get a `_twin`
    /// sharing size, dynamism and page structure.
    pub confusable_pairs: usize,
    pub small_sites: Option<SmallSites>,
    /// Explicit site list; overrides the generated one.
    pub sites: Vec<SiteSpec>,
    pub instances_per_site: usize,
    pub response_sizes: ResponseSizes,
    /// Sites in a group share the source-page hash and page structure.
    pub duplicate_groups: Vec<Vec<String>>,
    pub outlier_rate: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_sites: 10,
            base_bytes: 20_000.0,
            size_ratio: 2.0,
            dynamism: 0.05,
            confusable_pairs: 0,
            small_sites: None,
            sites: Vec::new(),
            instances_per_site: 70,
            response_sizes: ResponseSizes::default(),
            duplicate_groups: Vec::new(),
            outlier_rate: 0.0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    /// The resolved site list, sorted by id.
    pub fn site_specs(&self) -> Vec<SiteSpec> {
        let mut sites = if !self.sites.is_empty() {
            self.sites.clone()
        } else {
            let mut v = Vec::new();
            for i in 0..self.n_sites {
                let mean = self.base_bytes * self.size_ratio.powi(i as i32);
                let dynamism = match self.small_sites {
                    Some(s) if i < s.count => s.dynamism,
                    _ => self.dynamism,
                };
                let id = format!("site{i:03}");
                v.push(SiteSpec::new(&id, mean, dynamism));
                if i < self.confusable_pairs {
                    v.push(SiteSpec::new(format!("{id}_twin"), mean, dynamism).with_template(&id));
                }
            }
            v
        };
        sites.sort_by(|a, b| a.id.cmp(&b.id));
        sites
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        let sites = self.site_specs();
        if sites.is_empty() {
            return bad("no sites".into());
        }
        if self.instances_per_site == 0 {
            return bad("instances_per_site must be positive".into());
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return bad(format!("outlier_rate {} not in [0, 1)", self.outlier_rate));
        }
        let rs = self.response_sizes;
        if rs.min_resources == 0 || rs.min_resources > rs.max_resources {
            return bad("need 1 <= min_resources <= max_resources".into());
        }
        for w in sites.windows(2) {
            if w[0].id == w[1].id {
                return bad(format!("duplicate site id {}", w[0].id));
            }
        }
        for s in &sites {
            if !(s.mean_bytes > 0.0 && s.mean_bytes.is_finite()) {
                return bad(format!("site {}: mean_bytes must be positive", s.id));
            }
            if !(s.dynamism >= 0.0 && s.dynamism.is_finite()) {
                return bad(format!("site {}: dynamism must be non-negative", s.id));
            }
            if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
                return bad(format!("site id {:?} is not a valid directory name", s.id));
            }
        }
        for g in &self.duplicate_groups {
            if let Some(m) = g.iter().find(|m| !sites.iter().any(|s| &s.id == *m)) {
                return bad(format!("duplicate group names unknown site {m}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitTruth {
    pub instance: String,
    pub incoming_bytes: u64,
    pub outgoing_bytes: u64,
    pub packets: usize,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    #[serde(flatten)]
    pub spec: SiteSpec,
    pub source_hash: String,
    pub resources: usize,
    pub generator: Option<String>,
    pub visits: Vec<VisitTruth>,
}

/// Ground truth for a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub instances_per_site: usize,
    pub outlier_rate: f64,
    pub sites: Vec<SiteTruth>,
}

struct Resource {
    host: String,
    share: f64,
    content_type: &'static str,
}

struct Structure {
    resources: Vec<Resource>,
    /// Resource count of each request/response phase.
    phases: Vec<usize>,
    generator: Option<&'static str>,
}

const CONTENT_TYPES: [&str; 7] =
    ["image/png", "image/jpeg", "application/javascript", "text/css", "font/woff2", "application/octet-stream", "video/mp4"];
const GENERATORS: [&str; 4] = ["WordPress 4.9", "Drupal 7", "MediaWiki 1.31", "Joomla! 3"];

fn draw_structure(site: &SiteSpec, spec: &WorldSpec) -> Structure {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("structure/{}", site.structure_key())));
    let rs = spec.response_sizes;
    let n = rng.random_range(rs.min_resources..=rs.max_resources);
    let weights: Vec<f64> = (0..n).map(|_| { let e: f64 = Exp1.sample(&mut rng); 0.05 + e }).collect();
    let total: f64 = weights.iter().sum();
    let key = site.structure_key();
    let resources = weights
        .iter()
        .enumerate()
        .map(|(i, w)| Resource {
            host: if i > 0 && rng.random_bool(0.2) { format!("cdn{}.{key}.onion", i % 3) } else { format!("{key}.onion") },
            share: w / total,
            content_type: if i == 0 { "text/html" } else { CONTENT_TYPES[rng.random_range(0..CONTENT_TYPES.len())] },
        })
        .collect();
    let n_phases = rng.random_range(1..=n.min(4));
    let mut phases = vec![1; n_phases];
    phases[0] = n - (n_phases - 1);
    let generator = rng.random_bool(0.3).then(|| GENERATORS[rng.random_range(0..GENERATORS.len())]);
    Structure { resources, phases, generator }
}

fn source_hash(key: &str) -> String {
    hex::encode(Sha256::digest(format!("source-page/{key}").as_bytes()))
}

/// Truncated standard normal on [-3, 3].
fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// Split `total` bytes over resources in proportion to `shares`; the last
/// takes the remainder.
fn split_bytes(total: u64, shares: &[f64]) -> Vec<u64> {
    let sum: f64 = shares.iter().sum();
    let mut out: Vec<u64> = shares.iter().map(|s| (total as f64 * s / sum).floor() as u64).collect();
    let used: u64 = out[..out.len() - 1].iter().sum();
    *out.last_mut().unwrap() = total - used.min(total);
    out
}

/// Packets of one visit, fetching resources in `order`.
fn packetize(site: &str, instance: &str, per_resource: &[u64], order: &[usize]) -> PacketTrace {
    let mut packets = Vec::new();
    let mut since_out = 0usize;
    let push = |packets: &mut Vec<Packet>, direction, size| {
        let time = packets.len() as f64 * PACKET_GAP;
        packets.push(Packet { time, direction, size });
    };
    for bytes in order.iter().map(|&i| per_resource[i]) {
        push(&mut packets, Direction::Out, REQUEST_SIZE);
        let mut left = bytes;
        while left > 0 {
            let size = left.min(MTU_PAYLOAD);
            left -= size;
            push(&mut packets, Direction::In, size as u32);
            since_out += 1;
            if since_out == IN_PER_OUT {
                since_out = 0;
                push(&mut packets, Direction::Out, REQUEST_SIZE);
            }
        }
    }
    PacketTrace { site_id: site.to_string(), instance_id: instance.to_string(), packets }
}

fn crawl_record(structure: &Structure, per_resource: &[u64], trace: &PacketTrace) -> CrawlRecord {
    let requests = structure
        .resources
        .iter()
        .enumerate()
        .map(|(i, r)| HttpRequest { url: format!("http://{}/r{i}", r.host), header_size: REQUEST_SIZE as u64, body_size: 0 })
        .collect();
    let responses: Vec<HttpResponse> = structure
        .resources
        .iter()
        .zip(per_resource)
        .map(|(r, &b)| {
            let header = b.min(RESPONSE_HEADER);
            HttpResponse {
                status: 200,
                content_type: r.content_type.to_string(),
                content_length: b - header,
                header_size: header,
                has_location: false,
            }
        })
        .collect();
    let mut events = Vec::new();
    for &n in &structure.phases {
        events.extend(std::iter::repeat_n(HttpEvent::Req, n));
        events.extend(std::iter::repeat_n(HttpEvent::Resp, n));
    }
    let total: u64 = per_resource.iter().sum();
    CrawlRecord {
        html_source_size: responses[0].content_length,
        requests,
        responses,
        page_load_time_ms: trace.duration() * 1000.0,
        screenshot_size: 20_000 + total / 10,
        generator_meta: structure.generator.map(String::from),
        events,
    }
}

/// Everything generated for one site.
pub struct SiteOutput {
    pub truth: SiteTruth,
    pub traces: Vec<PacketTrace>,
    pub records: Vec<CrawlRecord>,
}

pub fn simulate_site(site: &SiteSpec, spec: &WorldSpec, hash_key: &str) -> SiteOutput {
    let structure = draw_structure(site, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("visits/{}", site.id)));
    let (mut traces, mut records, mut visits) = (Vec::new(), Vec::new(), Vec::new());
    for v in 0..spec.instances_per_site {
        let instance = format!("{v:03}");
        let z = truncated_normal(&mut rng);
        let outlier = rng.random_bool(spec.outlier_rate);
        let mut total = (site.mean_bytes * (1.0 + site.dynamism * z)).round().max(1.0);
        if outlier {
            total *= OUTLIER_FACTOR;
        }
        let shares: Vec<f64> = structure.resources.iter().map(|r| r.share).collect();
        let per_resource = split_bytes(total as u64, &shares);
        // the page itself comes first; subresources arrive in varying order
        let mut order: Vec<usize> = (0..per_resource.len()).collect();
        order[1..].shuffle(&mut rng);
        let trace = packetize(&site.id, &instance, &per_resource, &order);
        records.push(crawl_record(&structure, &per_resource, &trace));
        visits.push(VisitTruth {
            instance,
            incoming_bytes: trace.bytes(Direction::In),
            outgoing_bytes: trace.bytes(Direction::Out),
            packets: trace.len(),
            outlier,
        });
        traces.push(trace);
    }
    SiteOutput {
        truth: SiteTruth {
            spec: site.clone(),
            source_hash: source_hash(hash_key),
            resources: structure.resources.len(),
            generator: structure.generator.map(String::from),
            visits,
        },
        traces,
        records,
    }
}

/// Simulate every site of `spec` in memory.
pub fn simulate_world(spec: &WorldSpec) -> Result<Vec<SiteOutput>, SynthError> {
    spec.validate()?;
    let mut hash_key: BTreeMap<String, String> = BTreeMap::new();
    for g in &spec.duplicate_groups {
        let mut members = g.clone();
        members.sort();
        for m in &members {
            hash_key.insert(m.clone(), members[0].clone());
        }
    }
    let mut sites = spec.site_specs();
    for s in &mut sites {
        if let Some(k) = hash_key.get(&s.id) {
            if s.template.is_none() {
                s.template = Some(k.clone());
            }
        }
    }
    Ok(sites
        .par_iter()
        .map(|s| {
            let key = hash_key.get(&s.id).cloned().unwrap_or_else(|| s.id.clone());
            simulate_site(s, spec, &key)
        })
        .collect())
}

/// Build an in-memory dataset, with source hashes, from simulated sites.
pub fn to_dataset(sites: &[SiteOutput]) -> Dataset {
    let mut d = Dataset::from_traces(sites.iter().flat_map(|s| s.traces.iter().cloned()));
    for s in sites {
        d.source_hashes.insert(s.truth.spec.id.clone(), s.truth.source_hash.clone());
    }
    d
}

pub fn manifest(spec: &WorldSpec, sites: &[SiteOutput]) -> Manifest {
    Manifest {
        seed: spec.seed,
        instances_per_site: spec.instances_per_site,
        outlier_rate: spec.outlier_rate,
        sites: sites.iter().map(|s| s.truth.clone()).collect(),
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<(), SynthError> {
    fs::write(path, contents).map_err(|source| SynthError::Io { path: path.to_path_buf(), source })
}

fn mkdir(path: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(path).map_err(|source| SynthError::Io { path: path.to_path_buf(), source })
}

fn json(v: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("plain data serializes");
    s.push(b'\n');
    s
}

/// Write the world under `out` in the dataset layout, plus `manifest.json`.
pub fn generate_world(spec: &WorldSpec, out: &Path) -> Result<Manifest, SynthError> {
    let sites = simulate_world(spec)?;
    mkdir(out)?;
    sites.par_iter().try_for_each(|s| -> Result<(), SynthError> {
        let dir = out.join(&s.truth.spec.id);
        let pdir = dir.join("profile");
        mkdir(&pdir)?;
        write(&dir.join("profile.json"), &json(&serde_json::json!({ "source_hash": s.truth.source_hash })))?;
        for (t, r) in s.traces.iter().zip(&s.records) {
            write(&dir.join(format!("{}.trace", t.instance_id)), t.to_trace_text().as_bytes())?;
            write(&pdir.join(format!("{}.json", t.instance_id)), &json(r))?;
        }
        Ok(())
    })?;
    let m = manifest(spec, &sites);
    write(&out.join("manifest.json"), &json(&m))?;
    Ok(m)
}
