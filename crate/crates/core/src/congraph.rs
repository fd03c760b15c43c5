//! The misclassification digraph: sites are nodes, an edge A -> B counts the
//! instances of A predicted as B. Communities come from Louvain on the
//! undirected projection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use quick_xml::escape::escape;
use quick_xml::events::Event;
use quick_xml::Reader;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::Prediction;
use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("unsupported graph format {0:?}")]
    UnsupportedFormat(String),
    #[error("malformed {format} document: {message}")]
    Parse { format: &'static str, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionGraph {
    pub nodes: BTreeSet<String>,
    /// `(true site, predicted site)` to count; never a self-edge.
    pub edges: BTreeMap<(String, String), usize>,
    pub communities: Option<BTreeMap<String, usize>>,
}

pub fn build_graph(preds: &[Prediction]) -> ConfusionGraph {
    let mut g = ConfusionGraph::default();
    for p in preds {
        g.nodes.insert(p.true_site.clone());
        if let Some(guess) = p.predicted() {
            g.nodes.insert(guess.to_string());
            if guess != p.true_site {
                *g.edges.entry((p.true_site.clone(), guess.to_string())).or_default() += 1;
            }
        }
    }
    g
}

impl ConfusionGraph {
    pub fn total_weight(&self) -> usize {
        self.edges.values().sum()
    }

    /// Weight on edges whose reverse also exists, over the total weight.
    pub fn symmetric_weight_fraction(&self) -> f64 {
        let total = self.total_weight();
        if total == 0 {
            return 0.0;
        }
        let sym: usize =
            self.edges.iter().filter(|((a, b), _)| self.edges.contains_key(&(b.clone(), a.clone()))).map(|(_, w)| w).sum();
        sym as f64 / total as f64
    }
}

/// Undirected weighted graph as symmetric adjacency maps. A self-loop's
/// weight is stored once and counted twice in degrees.
#[derive(Debug, Clone)]
struct Undirected {
    adj: Vec<BTreeMap<usize, f64>>,
}

impl Undirected {
    fn degree(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|(&j, &w)| if j == i { 2.0 * w } else { w }).sum()
    }

    fn two_m(&self) -> f64 {
        (0..self.adj.len()).map(|i| self.degree(i)).sum()
    }
}

fn projection(g: &ConfusionGraph) -> (Vec<String>, Undirected) {
    let names: Vec<String> = g.nodes.iter().cloned().collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut adj = vec![BTreeMap::new(); names.len()];
    for ((a, b), &w) in &g.edges {
        let (i, j) = (index[a.as_str()], index[b.as_str()]);
        *adj[i].entry(j).or_insert(0.0) += w as f64;
        *adj[j].entry(i).or_insert(0.0) += w as f64;
    }
    (names, Undirected { adj })
}

/// Modularity of `part` on the undirected projection of `g`.
pub fn modularity(g: &ConfusionGraph, part: &BTreeMap<String, usize>, resolution: f64) -> f64 {
    let (names, u) = projection(g);
    let c: Vec<usize> = names.iter().map(|n| part[n]).collect();
    modularity_of(&u, &c, resolution)
}

fn modularity_of(u: &Undirected, c: &[usize], resolution: f64) -> f64 {
    let two_m = u.two_m();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut internal = 0.0;
    let mut tot: BTreeMap<usize, f64> = BTreeMap::new();
    for i in 0..u.adj.len() {
        *tot.entry(c[i]).or_default() += u.degree(i);
        for (&j, &w) in &u.adj[i] {
            if c[i] == c[j] {
                internal += if i == j { 2.0 * w } else { w };
            }
        }
    }
    internal / two_m - resolution * tot.values().map(|t| (t / two_m).powi(2)).sum::<f64>()
}

/// One round of local moves. Returns the community of each node and whether
/// anything moved.
fn local_moves(u: &Undirected, order: &[usize], resolution: f64) -> (Vec<usize>, bool) {
    let n = u.adj.len();
    let two_m = u.two_m();
    let k: Vec<f64> = (0..n).map(|i| u.degree(i)).collect();
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot = k.clone();
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for &i in order {
            let old = comm[i];
            tot[old] -= k[i];
            let mut links: BTreeMap<usize, f64> = BTreeMap::new();
            links.insert(old, 0.0);
            for (&j, &w) in &u.adj[i] {
                if j != i {
                    *links.entry(comm[j]).or_default() += w;
                }
            }
            let gain = |c: usize, l: f64| l - resolution * tot[c] * k[i] / two_m;
            let mut best = old;
            let mut best_gain = gain(old, links[&old]);
            for (&c, &l) in &links {
                let g = gain(c, l);
                if g > best_gain + 1e-12 {
                    best = c;
                    best_gain = g;
                }
            }
            tot[best] += k[i];
            if best != old {
                comm[i] = best;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    (comm, moved_any)
}

/// Louvain modularity optimization. The sweep order over the original nodes
/// is shuffled once with `seed`; community ids are numbered in order of each
/// community's lexicographically smallest member.
pub fn detect_communities(g: &ConfusionGraph, resolution: f64, seed: u64) -> Result<BTreeMap<String, usize>, GraphError> {
    if g.nodes.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    let (names, mut u) = projection(g);
    let mut membership: Vec<usize> = (0..names.len()).collect();
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if u.two_m() > 0.0 {
        loop {
            let (comm, moved) = local_moves(&u, &order, resolution);
            if !moved {
                break;
            }
            // renumber densely in sweep order, then aggregate
            let mut dense: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in &order {
                let next = dense.len();
                dense.entry(comm[i]).or_insert(next);
            }
            for m in membership.iter_mut() {
                *m = dense[&comm[*m]];
            }
            let mut adj = vec![BTreeMap::new(); dense.len()];
            for i in 0..u.adj.len() {
                for (&j, &w) in &u.adj[i] {
                    let (ci, cj) = (dense[&comm[i]], dense[&comm[j]]);
                    if ci == cj && i != j {
                        // each internal edge is visited from both ends
                        *adj[ci].entry(cj).or_insert(0.0) += w / 2.0;
                    } else {
                        *adj[ci].entry(cj).or_insert(0.0) += w;
                    }
                }
            }
            u = Undirected { adj };
            order = (0..u.adj.len()).collect();
        }
    }
    let mut label: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        let next = label.len();
        let c = *label.entry(membership[i]).or_insert(next);
        out.insert(name.clone(), c);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStatistics {
    pub nodes: usize,
    pub edges: usize,
    pub total_weight: usize,
    pub mean_out_degree: f64,
    pub mean_in_degree: f64,
    pub max_out: Option<(String, usize)>,
    pub max_in: Option<(String, usize)>,
    /// Unordered pairs with edges in both directions, smaller id first.
    pub ellipse_pairs: Vec<(String, String)>,
    pub symmetric_weight_fraction: f64,
}

/// Degree statistics over distinct neighbors.
pub fn graph_statistics(g: &ConfusionGraph) -> GraphStatistics {
    let mut out_deg: BTreeMap<&str, usize> = g.nodes.iter().map(|n| (n.as_str(), 0)).collect();
    let mut in_deg = out_deg.clone();
    for (a, b) in g.edges.keys() {
        *out_deg.get_mut(a.as_str()).unwrap() += 1;
        *in_deg.get_mut(b.as_str()).unwrap() += 1;
    }
    let n = g.nodes.len().max(1) as f64;
    let max_of = |d: &BTreeMap<&str, usize>| {
        d.iter().fold(None, |best: Option<(&str, usize)>, (&s, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((s, v)),
        })
        .map(|(s, v)| (s.to_string(), v))
    };
    let ellipse_pairs = g
        .edges
        .keys()
        .filter(|(a, b)| a < b && g.edges.contains_key(&(b.clone(), a.clone())))
        .cloned()
        .collect();
    GraphStatistics {
        nodes: g.nodes.len(),
        edges: g.edges.len(),
        total_weight: g.total_weight(),
        mean_out_degree: g.edges.len() as f64 / n,
        mean_in_degree: g.edges.len() as f64 / n,
        max_out: max_of(&out_deg),
        max_in: max_of(&in_deg),
        ellipse_pairs,
        symmetric_weight_fraction: g.symmetric_weight_fraction(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunitySummary {
    pub community: usize,
    pub sites: Vec<String>,
    /// Median over member sites of their median incoming bytes.
    pub median_size: f64,
}

pub fn community_summary(communities: &BTreeMap<String, usize>, site_sizes: &BTreeMap<String, f64>) -> Vec<CommunitySummary> {
    let mut by: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (s, &c) in communities {
        by.entry(c).or_default().push(s.clone());
    }
    by.into_iter()
        .map(|(community, sites)| {
            let sizes: Vec<f64> = sites.iter().filter_map(|s| site_sizes.get(s).copied()).collect();
            CommunitySummary { community, median_size: stats::median(&sizes), sites }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Graphml,
    Dot,
}

impl FromStr for GraphFormat {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "graphml" => Ok(GraphFormat::Graphml),
            "dot" => Ok(GraphFormat::Dot),
            _ => Err(GraphError::UnsupportedFormat(s.to_string())),
        }
    }
}

pub fn export_graph(g: &ConfusionGraph, format: GraphFormat) -> Vec<u8> {
    match format {
        GraphFormat::Graphml => to_graphml(g),
        GraphFormat::Dot => to_dot(g),
    }
    .into_bytes()
}

pub fn parse_graph(bytes: &[u8], format: GraphFormat) -> Result<ConfusionGraph, GraphError> {
    let text = std::str::from_utf8(bytes).map_err(|e| GraphError::Parse {
        format: match format {
            GraphFormat::Graphml => "GraphML",
            GraphFormat::Dot => "DOT",
        },
        message: e.to_string(),
    })?;
    match format {
        GraphFormat::Graphml => from_graphml(text),
        GraphFormat::Dot => from_dot(text),
    }
}

fn to_graphml(g: &ConfusionGraph) -> String {
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
    s.push_str("  <key id=\"community\" for=\"node\" attr.name=\"community\" attr.type=\"int\"/>\n");
    s.push_str("  <key id=\"weight\" for=\"edge\" attr.name=\"weight\" attr.type=\"int\"/>\n");
    s.push_str("  <graph id=\"confusion\" edgedefault=\"directed\">\n");
    for n in &g.nodes {
        match g.communities.as_ref().and_then(|c| c.get(n)) {
            Some(c) => {
                let _ = writeln!(s, "    <node id=\"{}\"><data key=\"community\">{c}</data></node>", escape(n.as_str()));
            }
            None => {
                let _ = writeln!(s, "    <node id=\"{}\"/>", escape(n.as_str()));
            }
        }
    }
    for ((a, b), w) in &g.edges {
        let _ = writeln!(
            s,
            "    <edge source=\"{}\" target=\"{}\"><data key=\"weight\">{w}</data></edge>",
            escape(a.as_str()),
            escape(b.as_str())
        );
    }
    s.push_str("  </graph>\n</graphml>\n");
    s
}

fn xml_err(message: impl ToString) -> GraphError {
    GraphError::Parse { format: "GraphML", message: message.to_string() }
}

fn from_graphml(text: &str) -> Result<ConfusionGraph, GraphError> {
    enum Owner {
        Node(String),
        Edge(String, String),
    }
    let mut reader = Reader::from_str(text);
    reader.config_mut().trim_text(true);
    let mut g = ConfusionGraph::default();
    let mut communities = BTreeMap::new();
    let mut owner: Option<Owner> = None;
    let mut data_key: Option<String> = None;
    loop {
        let ev = reader.read_event().map_err(xml_err)?;
        match &ev {
            Event::Start(e) | Event::Empty(e) => {
                let mut attrs = BTreeMap::new();
                for a in e.attributes() {
                    let a = a.map_err(xml_err)?;
                    let key = String::from_utf8_lossy(a.key.as_ref()).into_owned();
                    attrs.insert(key, a.unescape_value().map_err(xml_err)?.into_owned());
                }
                let get = |k: &str| attrs.get(k).cloned().ok_or_else(|| xml_err(format!("missing attribute {k}")));
                let empty = matches!(ev, Event::Empty(_));
                match e.name().as_ref() {
                    b"node" => {
                        let id = get("id")?;
                        g.nodes.insert(id.clone());
                        owner = (!empty).then_some(Owner::Node(id));
                    }
                    b"edge" => {
                        let (a, b) = (get("source")?, get("target")?);
                        g.edges.insert((a.clone(), b.clone()), 1);
                        owner = (!empty).then_some(Owner::Edge(a, b));
                    }
                    b"data" => data_key = Some(get("key")?),
                    _ => {}
                }
            }
            Event::Text(t) => {
                if let (Some(key), Some(o)) = (&data_key, &owner) {
                    let v = t.decode().map_err(xml_err)?;
                    let v: usize = v.trim().parse().map_err(|_| xml_err(format!("bad {key} value {v:?}")))?;
                    match (key.as_str(), o) {
                        ("community", Owner::Node(id)) => {
                            communities.insert(id.clone(), v);
                        }
                        ("weight", Owner::Edge(a, b)) => {
                            g.edges.insert((a.clone(), b.clone()), v);
                        }
                        _ => {}
                    }
                }
            }
            Event::End(e) => match e.name().as_ref() {
                b"data" => data_key = None,
                b"node" | b"edge" => owner = None,
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
    }
    for (a, b) in g.edges.keys() {
        if !g.nodes.contains(a) || !g.nodes.contains(b) {
            return Err(xml_err(format!("edge {a} -> {b} references an undeclared node")));
        }
    }
    if !communities.is_empty() {
        g.communities = Some(communities);
    }
    Ok(g)
}

fn dot_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn to_dot(g: &ConfusionGraph) -> String {
    let mut s = String::from("digraph confusion {\n");
    for n in &g.nodes {
        match g.communities.as_ref().and_then(|c| c.get(n)) {
            Some(c) => {
                let _ = writeln!(s, "  {} [community={c}];", dot_quote(n));
            }
            None => {
                let _ = writeln!(s, "  {};", dot_quote(n));
            }
        }
    }
    for ((a, b), w) in &g.edges {
        let _ = writeln!(s, "  {} -> {} [weight={w}];", dot_quote(a), dot_quote(b));
    }
    s.push_str("}\n");
    s
}

/// Reads back the subset of DOT that [`export_graph`] writes.
fn from_dot(text: &str) -> Result<ConfusionGraph, GraphError> {
    let err = |m: String| GraphError::Parse { format: "DOT", message: m };
    // take a quoted id off the front of `s`
    fn quoted(s: &str) -> Option<(String, &str)> {
        let s = s.trim_start().strip_prefix('"')?;
        let mut out = String::new();
        let mut chars = s.char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '\\' => out.push(chars.next()?.1),
                '"' => return Some((out, &s[i + 1..])),
                c => out.push(c),
            }
        }
        None
    }
    fn attr(rest: &str, key: &str) -> Option<usize> {
        let inner = rest.trim().strip_prefix('[')?.split(']').next()?;
        inner.split(',').find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k.trim() == key).then(|| v.trim().parse().ok()).flatten()
        })
    }
    let mut g = ConfusionGraph::default();
    let mut communities = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("digraph") || line == "}" {
            continue;
        }
        let line = line.strip_suffix(';').unwrap_or(line);
        let (a, rest) = quoted(line).ok_or_else(|| err(format!("line {}: expected a quoted id", ln + 1)))?;
        if let Some(rest) = rest.trim_start().strip_prefix("->") {
            let (b, rest) = quoted(rest).ok_or_else(|| err(format!("line {}: expected edge target", ln + 1)))?;
            let w = attr(rest, "weight").ok_or_else(|| err(format!("line {}: edge without weight", ln + 1)))?;
            g.edges.insert((a, b), w);
        } else {
            if let Some(c) = attr(rest, "community") {
                communities.insert(a.clone(), c);
            }
            g.nodes.insert(a);
        }
    }
    if !communities.is_empty() {
        g.communities = Some(communities);
    }
    Ok(g)
}
