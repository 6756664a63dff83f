//! Multigraphs over node IDs, clusters, cuts and the conductance/diameter
//! measurements used throughout the simulator.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;

/// Largest node count accepted by [`exact_conductance`].
pub const EXACT_CONDUCTANCE_LIMIT: usize = 24;

/// Node identifier in `1..=n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn from_index(index: usize) -> Self {
        NodeId(index as u32 + 1)
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph has {nodes} nodes, exact conductance is limited to {limit}")]
    TooLarge { nodes: usize, limit: usize },
    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("graph needs at least two nodes")]
    TooSmall,
    #[error("node {0} is outside the graph")]
    UnknownNode(u32),
    #[error("sample count must be positive")]
    NoSamples,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Undirected multigraph on the nodes `1..=n`.
///
/// Non-loop edges are stored as per-node multiplicity maps. Self-loops are
/// kept as a bare count of walk slots per node: they matter for random-walk
/// transitions and nothing else, so cuts and volumes never see them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OverlayGraph {
    adj: Vec<BTreeMap<NodeId, u32>>,
    degree: Vec<u32>,
    loops: Vec<u32>,
    edges: u64,
}

impl OverlayGraph {
    pub fn new(n: usize) -> Self {
        OverlayGraph {
            adj: vec![BTreeMap::new(); n],
            degree: vec![0; n],
            loops: vec![0; n],
            edges: 0,
        }
    }

    /// Builds a multigraph; repeated pairs raise the multiplicity.
    pub fn from_edges<I: IntoIterator<Item = (NodeId, NodeId)>>(n: usize, edges: I) -> Self {
        let mut g = OverlayGraph::new(n);
        for (u, v) in edges {
            g.add_edge(u, v);
        }
        g
    }

    /// Builds a simple graph: duplicates collapse and self-loops are dropped.
    pub fn simple_from_edges<I: IntoIterator<Item = (NodeId, NodeId)>>(n: usize, edges: I) -> Self {
        let mut g = OverlayGraph::new(n);
        for (u, v) in edges {
            if u != v && !g.has_edge(u, v) {
                g.add_edge(u, v);
            }
        }
        g
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.adj.len()).map(NodeId::from_index)
    }

    pub fn contains(&self, v: NodeId) -> bool {
        v.0 >= 1 && v.index() < self.adj.len()
    }

    /// Adds one copy of `{u, v}`. A self-loop adds two walk slots.
    pub fn add_edge(&mut self, u: NodeId, v: NodeId) {
        self.add_edge_multi(u, v, 1);
    }

    pub fn add_edge_multi(&mut self, u: NodeId, v: NodeId, copies: u32) {
        assert!(self.contains(u) && self.contains(v), "edge ({u}, {v}) outside graph");
        if copies == 0 {
            return;
        }
        if u == v {
            self.loops[u.index()] += 2 * copies;
            return;
        }
        *self.adj[u.index()].entry(v).or_insert(0) += copies;
        *self.adj[v.index()].entry(u).or_insert(0) += copies;
        self.degree[u.index()] += copies;
        self.degree[v.index()] += copies;
        self.edges += copies as u64;
    }

    /// Removes one copy of `{u, v}`; returns false if there was none.
    pub fn remove_edge(&mut self, u: NodeId, v: NodeId) -> bool {
        if !self.contains(u) || !self.contains(v) {
            return false;
        }
        if u == v {
            let slots = &mut self.loops[u.index()];
            if *slots >= 2 {
                *slots -= 2;
                return true;
            }
            return false;
        }
        let Some(m) = self.adj[u.index()].get_mut(&v) else {
            return false;
        };
        *m -= 1;
        if *m == 0 {
            self.adj[u.index()].remove(&v);
        }
        let back = self.adj[v.index()].get_mut(&u).expect("asymmetric adjacency");
        *back -= 1;
        if *back == 0 {
            self.adj[v.index()].remove(&u);
        }
        self.degree[u.index()] -= 1;
        self.degree[v.index()] -= 1;
        self.edges -= 1;
        true
    }

    pub fn multiplicity(&self, u: NodeId, v: NodeId) -> u32 {
        if !self.contains(u) || !self.contains(v) || u == v {
            return 0;
        }
        self.adj[u.index()].get(&v).copied().unwrap_or(0)
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.multiplicity(u, v) > 0
    }

    /// Non-loop neighbors with their multiplicities, in ascending ID order.
    pub fn neighbors(&self, u: NodeId) -> impl Iterator<Item = (NodeId, u32)> + '_ {
        self.adj[u.index()].iter().map(|(&v, &m)| (v, m))
    }

    pub fn neighbor_ids(&self, u: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adj[u.index()].keys().copied()
    }

    /// Non-loop degree, counting multiplicity.
    pub fn degree(&self, u: NodeId) -> u32 {
        self.degree[u.index()]
    }

    pub fn loop_slots(&self, u: NodeId) -> u32 {
        self.loops[u.index()]
    }

    pub fn set_loop_slots(&mut self, u: NodeId, slots: u32) {
        self.loops[u.index()] = slots;
    }

    /// Degree as seen by a random walk: real slots plus loop slots.
    pub fn walk_degree(&self, u: NodeId) -> u32 {
        self.degree[u.index()] + self.loops[u.index()]
    }

    /// Number of non-loop edges, counting multiplicity.
    pub fn edge_count(&self) -> u64 {
        self.edges
    }

    /// Non-loop edges as `(lo, hi, multiplicity)`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, u32)> + '_ {
        self.adj.iter().enumerate().flat_map(|(i, row)| {
            let u = NodeId::from_index(i);
            row.range(NodeId(u.0 + 1)..).map(move |(&v, &m)| (u, v, m))
        })
    }

    pub fn max_degree(&self) -> u32 {
        self.degree.iter().copied().max().unwrap_or(0)
    }

    pub fn volume(&self) -> u64 {
        2 * self.edges
    }

    pub fn without_loops(&self) -> Self {
        let mut g = self.clone();
        g.loops.iter_mut().for_each(|l| *l = 0);
        g
    }

    /// Same support, every multiplicity set to one, loops removed.
    pub fn simplified(&self) -> Self {
        let mut g = OverlayGraph::new(self.node_count());
        for (u, v, _) in self.edges() {
            g.add_edge(u, v);
        }
        g
    }

    /// Induced subgraph on `nodes`, relabelled to `1..=k` in ascending ID order.
    pub fn subgraph(&self, nodes: &[NodeId]) -> Subgraph {
        let mut labels = nodes.to_vec();
        labels.sort_unstable();
        labels.dedup();
        let mut local = vec![u32::MAX; self.node_count()];
        for (i, v) in labels.iter().enumerate() {
            local[v.index()] = i as u32;
        }
        let mut graph = OverlayGraph::new(labels.len());
        for (i, &v) in labels.iter().enumerate() {
            let a = NodeId::from_index(i);
            for (w, m) in self.neighbors(v) {
                let j = local[w.index()];
                if j != u32::MAX && (j as usize) > i {
                    graph.add_edge_multi(a, NodeId::from_index(j as usize), m);
                }
            }
            graph.loops[i] = self.loops[v.index()];
        }
        Subgraph { graph, labels }
    }

    pub fn is_connected(&self) -> bool {
        self.node_count() > 0 && component_count(self) == 1
    }
}

/// A graph with local IDs `1..=k` plus the global ID of every local node.
///
/// `labels` is ascending, so comparisons between local IDs agree with
/// comparisons between the global IDs they stand for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subgraph {
    pub graph: OverlayGraph,
    pub labels: Vec<NodeId>,
}

impl Subgraph {
    /// Wraps a graph whose local IDs are already the global ones.
    pub fn whole(graph: OverlayGraph) -> Self {
        let labels = graph.nodes().collect();
        Subgraph { graph, labels }
    }

    pub fn global(&self, local: NodeId) -> NodeId {
        self.labels[local.index()]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Connected components, labelled by their smallest member.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClusterPartition {
    pub cluster_of: Vec<NodeId>,
    pub clusters: BTreeMap<NodeId, Vec<NodeId>>,
}

impl ClusterPartition {
    pub fn count(&self) -> usize {
        self.clusters.len()
    }

    pub fn label_of(&self, v: NodeId) -> NodeId {
        self.cluster_of[v.index()]
    }

    pub fn members(&self, label: NodeId) -> &[NodeId] {
        &self.clusters[&label]
    }

    pub fn largest(&self) -> (NodeId, &[NodeId]) {
        let mut best: Option<(NodeId, &Vec<NodeId>)> = None;
        for (&label, members) in &self.clusters {
            if best.is_none_or(|(_, b)| members.len() > b.len()) {
                best = Some((label, members));
            }
        }
        let (label, members) = best.expect("empty partition");
        (label, members)
    }

    /// True when every cluster of `self` lies inside one cluster of `coarser`.
    pub fn is_refined_by(&self, coarser: &ClusterPartition) -> bool {
        self.clusters.values().all(|members| {
            let label = coarser.label_of(members[0]);
            members.iter().all(|&v| coarser.label_of(v) == label)
        })
    }
}

pub fn connected_components(g: &OverlayGraph) -> ClusterPartition {
    let n = g.node_count();
    let mut cluster_of = vec![NodeId(0); n];
    let mut clusters = BTreeMap::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if cluster_of[start].0 != 0 {
            continue;
        }
        // Scanning in ascending order makes the first node reached the minimum.
        let label = NodeId::from_index(start);
        let mut members = vec![label];
        cluster_of[start] = label;
        queue.push_back(label);
        while let Some(u) = queue.pop_front() {
            for v in g.neighbor_ids(u) {
                if cluster_of[v.index()].0 == 0 {
                    cluster_of[v.index()] = label;
                    members.push(v);
                    queue.push_back(v);
                }
            }
        }
        members.sort_unstable();
        clusters.insert(label, members);
    }
    ClusterPartition { cluster_of, clusters }
}

fn component_count(g: &OverlayGraph) -> usize {
    connected_components(g).count()
}

fn require_connected(g: &OverlayGraph) -> Result<(), GraphError> {
    if g.node_count() < 2 {
        return Err(GraphError::TooSmall);
    }
    let components = component_count(g);
    if components != 1 {
        return Err(GraphError::Disconnected { components });
    }
    Ok(())
}

/// A cut `(S, V \ S)` with its conductance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CutReport {
    pub subset_size: usize,
    pub cut_edges: u64,
    pub vol_s: u64,
    pub vol_complement: u64,
    #[serde(serialize_with = "serialize_ratio")]
    pub conductance_of_cut: Ratio<u64>,
}

fn serialize_ratio<S: serde::Serializer>(r: &Ratio<u64>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
}

impl CutReport {
    fn new(subset_size: usize, cut_edges: u64, vol_s: u64, total: u64) -> Self {
        let vol_complement = total - vol_s;
        let denom = vol_s.min(vol_complement).max(1);
        CutReport {
            subset_size,
            cut_edges,
            vol_s,
            vol_complement,
            conductance_of_cut: Ratio::new(cut_edges, denom),
        }
    }

    pub fn conductance(&self) -> f64 {
        *self.conductance_of_cut.numer() as f64 / *self.conductance_of_cut.denom() as f64
    }
}

/// Cut statistics of an explicit node subset.
pub fn cut_of(g: &OverlayGraph, subset: &[NodeId]) -> CutReport {
    let mut inside = vec![false; g.node_count()];
    for &v in subset {
        inside[v.index()] = true;
    }
    let mut vol_s = 0;
    let mut cut = 0;
    let mut size = 0;
    for (i, &flag) in inside.iter().enumerate() {
        if !flag {
            continue;
        }
        size += 1;
        let u = NodeId::from_index(i);
        vol_s += g.degree(u) as u64;
        for (v, m) in g.neighbors(u) {
            if !inside[v.index()] {
                cut += m as u64;
            }
        }
    }
    CutReport::new(size, cut, vol_s, g.volume())
}

/// Minimum conductance over all nonempty proper subsets, by Gray-code
/// enumeration.
pub fn exact_conductance(g: &OverlayGraph) -> Result<CutReport, GraphError> {
    let n = g.node_count();
    if n > EXACT_CONDUCTANCE_LIMIT {
        return Err(GraphError::TooLarge { nodes: n, limit: EXACT_CONDUCTANCE_LIMIT });
    }
    require_connected(g)?;
    let nbrs: Vec<Vec<(usize, u64)>> = g
        .nodes()
        .map(|u| g.neighbors(u).map(|(v, m)| (v.index(), m as u64)).collect())
        .collect();
    let deg: Vec<u64> = g.nodes().map(|u| g.degree(u) as u64).collect();
    let total = g.volume();

    // The last node never joins S, so every visited subset is proper.
    let mut in_set = 0u32;
    let mut size = 0usize;
    let mut cut: u64 = 0;
    let mut vol: u64 = 0;
    let mut best: Option<CutReport> = None;
    for k in 1u32..(1u32 << (n - 1)) {
        let v = k.trailing_zeros() as usize;
        let bit = 1u32 << v;
        let mut into_s = 0u64;
        for &(w, m) in &nbrs[v] {
            if in_set & (1 << w) != 0 {
                into_s += m;
            }
        }
        if in_set & bit == 0 {
            in_set |= bit;
            size += 1;
            cut = cut + deg[v] - 2 * into_s;
            vol += deg[v];
        } else {
            in_set &= !bit;
            size -= 1;
            cut = cut + 2 * into_s - deg[v];
            vol -= deg[v];
        }
        let denom = vol.min(total - vol);
        let better = match &best {
            None => true,
            Some(b) => {
                let bd = b.vol_s.min(b.vol_complement);
                (cut as u128) * (bd as u128) < (b.cut_edges as u128) * (denom as u128)
            }
        };
        if better {
            best = Some(CutReport::new(size, cut, vol, total));
        }
    }
    Ok(best.expect("connected graph with two nodes has a cut"))
}

/// Upper bound on conductance from sampled cuts. Even samples sweep the BFS
/// order from a random root, taking every prefix (so every ball and every
/// partial next layer); odd samples are random balanced bisections.
pub fn estimate_conductance(g: &OverlayGraph, samples: usize, seed: u64) -> Result<f64, GraphError> {
    estimate_conductance_cut(g, samples, seed).map(|c| c.conductance())
}

pub fn estimate_conductance_cut(
    g: &OverlayGraph,
    samples: usize,
    seed: u64,
) -> Result<CutReport, GraphError> {
    if samples == 0 {
        return Err(GraphError::NoSamples);
    }
    require_connected(g)?;
    let n = g.node_count();
    let total = g.volume();
    let mut rng = stream(seed, &[0x636f_6e64]);
    let mut best: Option<CutReport> = None;
    let consider = |c: CutReport, best: &mut Option<CutReport>| {
        if c.subset_size == 0 || c.subset_size == n {
            return;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let bd = b.vol_s.min(b.vol_complement) as u128;
                let cd = c.vol_s.min(c.vol_complement) as u128;
                (c.cut_edges as u128) * bd < (b.cut_edges as u128) * cd
            }
        };
        if better {
            *best = Some(c);
        }
    };

    let mut dist = vec![u32::MAX; n];
    let mut inside = vec![false; n];
    let mut order: Vec<NodeId> = g.nodes().collect();
    for sample in 0..samples {
        if sample % 2 == 0 {
            let root = NodeId::from_index(rng.gen_range(0..n));
            let layers = bfs_layers(g, root, &mut dist);
            inside.iter_mut().for_each(|f| *f = false);
            let (mut cut, mut vol, mut size) = (0u64, 0u64, 0usize);
            for layer in &layers {
                for &v in layer {
                    let mut into_s = 0u64;
                    for (w, m) in g.neighbors(v) {
                        if inside[w.index()] {
                            into_s += m as u64;
                        }
                    }
                    inside[v.index()] = true;
                    let d = g.degree(v) as u64;
                    cut = cut + d - 2 * into_s;
                    vol += d;
                    size += 1;
                    consider(CutReport::new(size, cut, vol, total), &mut best);
                }
            }
        } else {
            order.shuffle(&mut rng);
            consider(cut_of(g, &order[..n / 2]), &mut best);
        }
    }
    Ok(best.expect("every connected graph with two nodes yields a cut"))
}

/// BFS layers from `root`; `dist` is scratch space of length n.
fn bfs_layers(g: &OverlayGraph, root: NodeId, dist: &mut [u32]) -> Vec<Vec<NodeId>> {
    dist.iter_mut().for_each(|d| *d = u32::MAX);
    dist[root.index()] = 0;
    let mut layers = vec![vec![root]];
    loop {
        let mut next = Vec::new();
        for &u in layers.last().unwrap() {
            for v in g.neighbor_ids(u) {
                if dist[v.index()] == u32::MAX {
                    dist[v.index()] = layers.len() as u32;
                    next.push(v);
                }
            }
        }
        if next.is_empty() {
            return layers;
        }
        next.sort_unstable();
        layers.push(next);
    }
}

/// Eccentricity of `root` and the smallest farthest node.
pub fn eccentricity(g: &OverlayGraph, root: NodeId) -> (u32, NodeId) {
    let mut dist = vec![u32::MAX; g.node_count()];
    let layers = bfs_layers(g, root, &mut dist);
    let far = layers.last().unwrap()[0];
    ((layers.len() - 1) as u32, far)
}

/// Largest double-sweep BFS eccentricity over `roots` random starting nodes.
pub fn pseudo_diameter(g: &OverlayGraph, roots: usize, seed: u64) -> Result<u32, GraphError> {
    if roots == 0 {
        return Err(GraphError::NoSamples);
    }
    if g.node_count() == 1 {
        return Ok(0);
    }
    require_connected(g)?;
    let mut rng = stream(seed, &[0x6469_616d]);
    let mut best = 0;
    for _ in 0..roots {
        let root = NodeId::from_index(rng.gen_range(0..g.node_count()));
        let (_, far) = eccentricity(g, root);
        let (ecc, _) = eccentricity(g, far);
        best = best.max(ecc);
    }
    Ok(best)
}

/// Parses `u v` lines; `#` starts a comment line. IDs are returned verbatim.
pub fn parse_edge_list(text: &str) -> Result<Vec<(u64, u64)>, GraphError> {
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut field = |what: &str| -> Result<u64, GraphError> {
            let token = parts.next().ok_or_else(|| GraphError::Parse {
                line: i + 1,
                message: format!("missing {what} endpoint"),
            })?;
            token.parse::<u64>().map_err(|_| GraphError::Parse {
                line: i + 1,
                message: format!("invalid node id {token:?}"),
            })
        };
        let u = field("first")?;
        let v = field("second")?;
        if parts.next().is_some() {
            return Err(GraphError::Parse { line: i + 1, message: "expected two fields".into() });
        }
        edges.push((u, v));
    }
    Ok(edges)
}

/// Writes the non-loop support of `g` as an edge list.
pub fn write_edge_list(g: &OverlayGraph) -> String {
    let mut out = format!("# nodes {} edges {}\n", g.node_count(), g.edge_count());
    for (u, v, m) in g.edges() {
        for _ in 0..m {
            out.push_str(&format!("{u} {v}\n"));
        }
    }
    out
}
