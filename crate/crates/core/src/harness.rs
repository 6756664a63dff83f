//! Graph generators, edge-list ingestion and experiment runs.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{default_b_max, EngineConfig, Mode};
use crate::graph::{
    connected_components, estimate_conductance, parse_edge_list, pseudo_diameter, GraphError, NodeId, OverlayGraph,
};
use crate::overlay::{build_overlay, OverlayError, OverlayParams, RunMetrics};
use crate::rng::{derive, stream};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("protocol failure with seed {seed}: {source}")]
    Protocol {
        seed: u64,
        #[source]
        source: OverlayError,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Protocol { .. } => 3,
            _ => 2,
        }
    }
}

/// Node `i` joins `i+1, ..., i+width` modulo `n`.
pub fn fat_cycle(n: usize, width: usize) -> Result<OverlayGraph, HarnessError> {
    if width == 0 || n < 2 * width + 1 {
        return Err(HarnessError::Spec(format!("fat_cycle needs width >= 1 and n >= 2*width+1, got n={n} width={width}")));
    }
    let edges = (0..n).flat_map(|i| (1..=width).map(move |j| (NodeId::from_index(i), NodeId::from_index((i + j) % n))));
    Ok(OverlayGraph::from_edges(n, edges))
}

pub fn grid(rows: usize, cols: usize) -> Result<OverlayGraph, HarnessError> {
    if rows == 0 || cols == 0 || rows * cols < 2 {
        return Err(HarnessError::Spec(format!("grid needs at least two cells, got {rows}x{cols}")));
    }
    let at = |r: usize, c: usize| NodeId::from_index(r * cols + c);
    let mut g = OverlayGraph::new(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                g.add_edge(at(r, c), at(r, c + 1));
            }
            if r + 1 < rows {
                g.add_edge(at(r, c), at(r + 1, c));
            }
        }
    }
    Ok(g)
}

/// Preferential attachment: a clique on `max(m, 2)` nodes, then every
/// newcomer links to `m` distinct nodes drawn with probability proportional
/// to degree.
pub fn barabasi_albert(n: usize, m: usize, seed: u64) -> Result<OverlayGraph, HarnessError> {
    let start = m.max(2);
    if m == 0 || n < start {
        return Err(HarnessError::Spec(format!("barabasi_albert needs m >= 1 and n >= max(m, 2), got n={n} m={m}")));
    }
    let mut rng = stream(seed, &[0xba]);
    let mut g = OverlayGraph::new(n);
    let mut ends = Vec::new();
    for i in 0..start {
        for j in i + 1..start {
            g.add_edge(NodeId::from_index(i), NodeId::from_index(j));
            ends.extend([NodeId::from_index(i), NodeId::from_index(j)]);
        }
    }
    for i in start..n {
        let me = NodeId::from_index(i);
        let mut picked = BTreeSet::new();
        while picked.len() < m {
            picked.insert(ends[rng.gen_range(0..ends.len())]);
        }
        for v in picked {
            g.add_edge(me, v);
            ends.extend([me, v]);
        }
    }
    Ok(g)
}

/// A random simple `d`-regular graph: points are paired at random, a pair
/// that would make a loop or a repeated edge is redrawn, and a dead end
/// restarts the pairing.
pub fn random_regular(n: usize, d: usize, seed: u64) -> Result<OverlayGraph, HarnessError> {
    if d == 0 || d >= n || (n * d) % 2 == 1 {
        return Err(HarnessError::Spec(format!("random_regular needs 0 < d < n and n*d even, got n={n} d={d}")));
    }
    let mut rng = stream(seed, &[0x4e9]);
    'restart: loop {
        let mut points: Vec<usize> = (0..n).flat_map(|u| std::iter::repeat_n(u, d)).collect();
        let mut g = OverlayGraph::new(n);
        while !points.is_empty() {
            let mut tries = 0;
            loop {
                let i = rng.gen_range(0..points.len());
                let j = rng.gen_range(0..points.len());
                let (a, b) = (NodeId::from_index(points[i]), NodeId::from_index(points[j]));
                if i != j && a != b && !g.has_edge(a, b) {
                    g.add_edge(a, b);
                    let (hi, lo) = (i.max(j), i.min(j));
                    points.swap_remove(hi);
                    points.swap_remove(lo);
                    break;
                }
                tries += 1;
                if tries > 64 * points.len() {
                    continue 'restart;
                }
            }
        }
        return Ok(g);
    }
}

/// An edge list remapped onto `1..=n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ingested {
    pub graph: OverlayGraph,
    /// Original ID of every node, indexed by new index.
    pub mapping: Vec<u64>,
    pub duplicate_edges: u64,
    pub self_loops: u64,
    pub notices: Vec<String>,
}

/// Builds a simple graph from edge-list text. IDs are renumbered in
/// ascending order of the original IDs.
pub fn ingest(text: &str, largest_component: bool) -> Result<Ingested, HarnessError> {
    let raw = parse_edge_list(text)?;
    let mut ids: Vec<u64> = raw.iter().flat_map(|&(u, v)| [u, v]).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(GraphError::TooSmall.into());
    }
    let index: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let mut g = OverlayGraph::new(ids.len());
    let (mut duplicate_edges, mut self_loops) = (0, 0);
    for &(u, v) in &raw {
        let (a, b) = (NodeId::from_index(index[&u]), NodeId::from_index(index[&v]));
        if a == b {
            self_loops += 1;
        } else if g.has_edge(a, b) {
            duplicate_edges += 1;
        } else {
            g.add_edge(a, b);
        }
    }
    let mut notices = Vec::new();
    if duplicate_edges > 0 {
        notices.push(format!("collapsed {duplicate_edges} duplicate edges"));
    }
    if self_loops > 0 {
        notices.push(format!("dropped {self_loops} self-loops"));
    }
    let parts = connected_components(&g);
    if parts.count() > 1 {
        if !largest_component {
            return Err(GraphError::Disconnected { components: parts.count() }.into());
        }
        let (_, keep) = parts.largest();
        let sub = g.subgraph(keep);
        notices.push(format!(
            "kept the largest of {} components: {} of {} nodes",
            parts.count(),
            keep.len(),
            ids.len()
        ));
        let mapping = sub.labels.iter().map(|v| ids[v.index()]).collect();
        return Ok(Ingested { graph: sub.graph, mapping, duplicate_edges, self_loops, notices });
    }
    Ok(Ingested { graph: g, mapping: ids, duplicate_edges, self_loops, notices })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSource {
    FatCycle { n: usize, width: usize },
    Grid { rows: usize, cols: usize },
    BarabasiAlbert { n: usize, m: usize, seed: u64 },
    RandomRegular { n: usize, d: usize, seed: u64 },
    EdgeList { path: String, largest_component: bool },
}

impl GraphSource {
    pub fn name(&self) -> String {
        match self {
            GraphSource::FatCycle { n, width } => format!("fat_cycle-{n}-{width}"),
            GraphSource::Grid { rows, cols } => format!("grid-{rows}-{cols}"),
            GraphSource::BarabasiAlbert { n, m, .. } => format!("ba-{n}-{m}"),
            GraphSource::RandomRegular { n, d, .. } => format!("regular-{n}-{d}"),
            GraphSource::EdgeList { path, .. } => std::path::Path::new(path)
                .file_stem()
                .map_or_else(|| path.clone(), |s| s.to_string_lossy().into_owned()),
        }
    }

    /// The graph plus any ingest notices.
    pub fn load(&self) -> Result<(OverlayGraph, Vec<String>), HarnessError> {
        Ok(match self {
            GraphSource::FatCycle { n, width } => (fat_cycle(*n, *width)?, Vec::new()),
            GraphSource::Grid { rows, cols } => (grid(*rows, *cols)?, Vec::new()),
            GraphSource::BarabasiAlbert { n, m, seed } => (barabasi_albert(*n, *m, *seed)?, Vec::new()),
            GraphSource::RandomRegular { n, d, seed } => (random_regular(*n, *d, *seed)?, Vec::new()),
            GraphSource::EdgeList { path, largest_component } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| HarnessError::Io { path: path.clone(), message: e.to_string() })?;
                let got = ingest(&text, *largest_component)?;
                (got.graph, got.notices)
            }
        })
    }
}

/// Everything needed to reproduce a result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub source: GraphSource,
    #[serde(default)]
    pub params: OverlayParams,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    /// Defaults to the engine's bound for the graph's ID range.
    #[serde(default)]
    pub b_max_bits: Option<u64>,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u64,
    #[serde(default)]
    pub trace: bool,
    #[serde(default = "default_conductance_samples")]
    pub conductance_samples: usize,
    #[serde(default = "default_diameter_roots")]
    pub diameter_roots: usize,
    /// Wall time makes output machine dependent, so it is opt-in.
    #[serde(default)]
    pub wall_time: bool,
}

fn default_max_rounds() -> u64 {
    1 << 40
}

fn default_conductance_samples() -> usize {
    64
}

fn default_diameter_roots() -> usize {
    8
}

impl ExperimentSpec {
    pub fn new(source: GraphSource, mode: Mode, seeds: Vec<u64>) -> Self {
        ExperimentSpec {
            source,
            params: OverlayParams::default(),
            mode,
            seeds,
            b_max_bits: None,
            max_rounds: default_max_rounds(),
            trace: false,
            conductance_samples: default_conductance_samples(),
            diameter_roots: default_diameter_roots(),
            wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Spec("at least one seed is required".into()));
        }
        if self.conductance_samples == 0 || self.diameter_roots == 0 {
            return Err(HarnessError::Spec("metric sample counts must be positive".into()));
        }
        self.params.validate().map_err(|e| HarnessError::Spec(e.to_string()))
    }
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub graph: String,
    pub n: usize,
    pub phases: u32,
    #[serde(rename = "D_G")]
    pub d_g: u32,
    #[serde(rename = "D_GE")]
    pub d_ge: u32,
    #[serde(rename = "Phi_G")]
    pub phi_g: f64,
    #[serde(rename = "Phi_GE")]
    pub phi_ge: f64,
    pub rounds: u64,
    pub messages: u64,
    pub bits: u64,
    pub max_degree: u32,
    pub wall_time_ms: Option<u64>,
}

pub const CSV_HEADER: &str = "graph,n,phases,D_G,D_GE,Phi_G,Phi_GE,rounds,messages,bits,max_degree,wall_time_ms";

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.4},{},{},{},{},{}",
            self.graph,
            self.n,
            self.phases,
            self.d_g,
            self.d_ge,
            self.phi_g,
            self.phi_ge,
            self.rounds,
            self.messages,
            self.bits,
            self.max_degree,
            self.wall_time_ms.map(|t| t.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub row: ResultRow,
    pub metrics: RunMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<crate::engine::TraceRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub notices: Vec<String>,
    /// Per-column lower median over the seeds.
    pub headline: ResultRow,
    pub runs: Vec<SeedRun>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.headline.csv_line())
    }
}

/// Measurements of the input graph, shared by every seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub diameter: u32,
    pub conductance: f64,
}

pub fn measure(g: &OverlayGraph, samples: usize, roots: usize, seed: u64) -> Result<GraphMetrics, GraphError> {
    if g.node_count() < 2 {
        return Ok(GraphMetrics { diameter: 0, conductance: 1.0 });
    }
    Ok(GraphMetrics {
        diameter: pseudo_diameter(g, roots, derive(seed, &[1]))?,
        conductance: estimate_conductance(g, samples, derive(seed, &[2]))?,
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, HarnessError> {
    spec.validate()?;
    let (g, notices) = spec.source.load()?;
    run_on_graph(spec, &g, notices)
}

/// Runs `spec` on an already loaded graph.
pub fn run_on_graph(spec: &ExperimentSpec, g: &OverlayGraph, notices: Vec<String>) -> Result<ExperimentReport, HarnessError> {
    spec.validate()?;
    if !g.is_connected() {
        return Err(GraphError::Disconnected { components: connected_components(g).count() }.into());
    }
    let n = g.node_count();
    let input = measure(g, spec.conductance_samples, spec.diameter_roots, 0)?;
    let name = spec.source.name();
    let mut runs = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let config = EngineConfig {
            seed,
            b_max_bits: spec.b_max_bits.unwrap_or_else(|| default_b_max(n.max(2) as u64)),
            mode: spec.mode,
            max_rounds: spec.max_rounds,
            trace: spec.trace,
        };
        let began = Instant::now();
        let out = build_overlay(g, &spec.params, config).map_err(|source| HarnessError::Protocol { seed, source })?;
        let elapsed = began.elapsed().as_millis() as u64;
        let built = measure(&out.graph, spec.conductance_samples, spec.diameter_roots, seed)?;
        let m = &out.metrics;
        let row = ResultRow {
            graph: name.clone(),
            n,
            phases: m.phases,
            d_g: input.diameter,
            d_ge: built.diameter,
            phi_g: input.conductance,
            phi_ge: built.conductance,
            rounds: m.rounds,
            messages: m.messages,
            bits: m.bits,
            max_degree: m.max_degree,
            wall_time_ms: spec.wall_time.then_some(elapsed),
        };
        let trace = spec.trace.then(|| out.network.trace().to_vec());
        runs.push(SeedRun { seed, row, metrics: out.metrics, trace });
    }
    let headline = median_row(&runs.iter().map(|r| r.row.clone()).collect::<Vec<_>>());
    Ok(ExperimentReport { spec: spec.clone(), notices, headline, runs })
}

fn lower_median<T: PartialOrd + Copy>(mut xs: Vec<T>) -> T {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in metrics"));
    xs[(xs.len() - 1) / 2]
}

/// Column-wise lower median.
pub fn median_row(rows: &[ResultRow]) -> ResultRow {
    let col = |f: &dyn Fn(&ResultRow) -> f64| lower_median(rows.iter().map(f).collect());
    let wall: Vec<u64> = rows.iter().filter_map(|r| r.wall_time_ms).collect();
    ResultRow {
        graph: rows[0].graph.clone(),
        n: rows[0].n,
        phases: col(&|r| r.phases as f64) as u32,
        d_g: col(&|r| r.d_g as f64) as u32,
        d_ge: col(&|r| r.d_ge as f64) as u32,
        phi_g: col(&|r| r.phi_g),
        phi_ge: col(&|r| r.phi_ge),
        rounds: lower_median(rows.iter().map(|r| r.rounds).collect()),
        messages: lower_median(rows.iter().map(|r| r.messages).collect()),
        bits: lower_median(rows.iter().map(|r| r.bits).collect()),
        max_degree: col(&|r| r.max_degree as f64) as u32,
        wall_time_ms: (!wall.is_empty()).then(|| lower_median(wall)),
    }
}
