//! Turning a connected cluster into a bounded-degree expander.
//!
//! [`create_expander`] pads the cluster into a regular lazy multigraph and
//! repeatedly rewires it along random-walk endpoints, which raises its
//! conductance but leaves degrees around `2 d log n`.
//! [`expander_degree_reduction`] then brings every degree down to a
//! constant: each node sends a few tokens on walks, and tokens settle at
//! nodes that are not yet full.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Network, Outgoing, WalkKind, WalkToken, WalkView};
use crate::graph::{connected_components, NodeId, OverlayGraph, Subgraph};
use crate::sketch::ceil_log2;

/// Bits of the origin ID carried by expansion and reduction tokens.
const TOKEN_PAYLOAD_BITS: u64 = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExpanderError {
    #[error("input cluster is disconnected")]
    Disconnected,
    #[error("node {node} has degree {degree} above the bound {bound}")]
    DegreeBound { node: NodeId, degree: u32, bound: u32 },
    #[error("invalid reduction parameters: {0}")]
    Params(String),
    #[error("{active} tokens still active after {phases} phases")]
    Unsatisfied { phases: u32, active: u64 },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// A regular lazy multigraph: every node has `delta_h` walk slots, at least
/// half of them loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenignGraph {
    pub graph: OverlayGraph,
    pub delta_h: u32,
    pub lambda: u32,
}

impl BenignGraph {
    pub fn is_regular(&self) -> bool {
        self.graph.nodes().all(|u| self.graph.walk_degree(u) == self.delta_h)
    }

    pub fn lazy_nodes(&self) -> usize {
        self.graph.nodes().filter(|&u| 2 * self.graph.loop_slots(u) >= self.delta_h).count()
    }
}

/// Replicates every edge `ceil(log2 n)` times and pads with loops up to
/// `2 d ceil(log2 n)` slots per node.
pub fn make_benign(g: &OverlayGraph, d: u32) -> Result<BenignGraph, ExpanderError> {
    let n = g.node_count();
    if n <= 1 {
        return Ok(BenignGraph { graph: g.clone(), delta_h: 0, lambda: 0 });
    }
    if !g.is_connected() {
        return Err(ExpanderError::Disconnected);
    }
    if let Some(u) = g.nodes().find(|&u| g.degree(u) > d) {
        return Err(ExpanderError::DegreeBound { node: u, degree: g.degree(u), bound: d });
    }
    let lambda = ceil_log2(n as u64);
    let delta_h = 2 * d * lambda;
    let mut h = OverlayGraph::new(n);
    for (u, v, m) in g.edges() {
        h.add_edge_multi(u, v, m * lambda);
    }
    for u in h.nodes().collect::<Vec<_>>() {
        let real = h.degree(u);
        h.set_loop_slots(u, delta_h - real);
    }
    Ok(BenignGraph { graph: h, delta_h, lambda })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Iterations {
    Fixed(u32),
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionParams {
    pub iterations: Iterations,
    pub walk_length: u32,
}

impl Default for ExpansionParams {
    fn default() -> Self {
        ExpansionParams { iterations: Iterations::Fixed(5), walk_length: 13 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationReport {
    pub tokens: u64,
    pub accepted: u64,
    pub capped_nodes: u64,
    pub repaired_nodes: u64,
    pub restored_edges: u64,
    pub non_lazy_nodes: u64,
    pub rounds: u64,
}

/// Keeps at most `cap` of each holder's tokens, chosen uniformly.
pub fn accept_tokens<R: Rng + ?Sized>(holdings: &mut [Vec<NodeId>], cap: usize, rng: &mut R) -> u64 {
    let mut capped = 0;
    for held in holdings.iter_mut() {
        if held.len() > cap {
            let mut keep: Vec<usize> = index::sample(rng, held.len(), cap).into_vec();
            keep.sort_unstable();
            *held = keep.into_iter().map(|i| held[i]).collect();
            capped += 1;
        }
    }
    capped
}

/// One rewiring round: `delta_h / 8` walks of length `ell` per node, an edge
/// from every holder to each accepted token's origin, loops as padding.
///
/// If the new edges split the cluster, nodes outside the largest piece put
/// back the edges they had before.
pub fn increase_expansion<R: Rng + ?Sized>(
    h: &BenignGraph,
    labels: &[NodeId],
    ell: u32,
    net: &mut Network,
    rng: &mut R,
) -> Result<(BenignGraph, IterationReport), ExpanderError> {
    let n = h.graph.node_count();
    let mut report = IterationReport::default();
    if n <= 1 {
        return Ok((h.clone(), report));
    }
    let per_node = h.delta_h / 8;
    let view = WalkView::new(&h.graph, labels);
    let mut tokens = Vec::with_capacity(n * per_node as usize);
    for u in h.graph.nodes() {
        for j in 0..per_node {
            tokens.push(WalkToken::new(u, ell, ((u.0 as u64) << 32) | j as u64, WalkKind::Expansion));
        }
    }
    report.tokens = tokens.len() as u64;
    let began = net.rounds();
    let out = net.run_walks(tokens, &view, TOKEN_PAYLOAD_BITS, rng)?;
    report.rounds = net.rounds() - began;

    let mut holdings = vec![Vec::new(); n];
    for t in &out.tokens {
        holdings[t.at.index()].push(t.origin);
    }
    report.capped_nodes = accept_tokens(&mut holdings, (3 * h.delta_h / 8) as usize, rng);

    let mut next = OverlayGraph::new(n);
    for (i, held) in holdings.iter().enumerate() {
        let holder = NodeId::from_index(i);
        report.accepted += held.len() as u64;
        for &origin in held {
            if origin != holder {
                next.add_edge(holder, origin);
            }
        }
    }

    let parts = connected_components(&next);
    if parts.count() > 1 {
        let (main, members) = parts.largest();
        report.repaired_nodes = (n - members.len()) as u64;
        for (u, v, m) in h.graph.edges() {
            if parts.label_of(u) != main || parts.label_of(v) != main {
                next.add_edge_multi(u, v, m);
                report.restored_edges += m as u64;
            }
        }
    }
    for u in next.nodes().collect::<Vec<_>>() {
        let real = next.degree(u);
        if real > h.delta_h {
            return Err(ExpanderError::DegreeBound { node: labels[u.index()], degree: real, bound: h.delta_h });
        }
        next.set_loop_slots(u, h.delta_h - real);
        if 2 * (h.delta_h - real) < h.delta_h {
            report.non_lazy_nodes += 1;
        }
    }
    Ok((BenignGraph { graph: next, delta_h: h.delta_h, lambda: h.lambda }, report))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CreateReport {
    pub phi_target: f64,
    pub delta_h: u32,
    pub lambda: u32,
    pub iterations: Vec<IterationReport>,
}

/// Builds an `O(log n)`-degree expander on a connected cluster whose maximum
/// degree is at most `d`.
pub fn create_expander<R: Rng + ?Sized>(
    g: &Subgraph,
    phi: f64,
    d: u32,
    params: &ExpansionParams,
    net: &mut Network,
    rng: &mut R,
) -> Result<(OverlayGraph, CreateReport), ExpanderError> {
    let n = g.len();
    let mut report = CreateReport { phi_target: phi, ..Default::default() };
    if n <= 1 {
        return Ok((g.graph.without_loops(), report));
    }
    let mut h = make_benign(&g.graph.without_loops(), d)?;
    report.delta_h = h.delta_h;
    report.lambda = h.lambda;
    let cap = ceil_log2(n as u64);
    let rounds = match params.iterations {
        Iterations::Fixed(k) => k.min(cap),
        Iterations::Auto => cap,
    };
    for _ in 0..rounds {
        let (next, it) = increase_expansion(&h, &g.labels, params.walk_length, net, rng)?;
        report.iterations.push(it);
        h = next;
    }
    let out = h.graph.without_loops();
    if !out.is_connected() {
        return Err(ExpanderError::Disconnected);
    }
    Ok((out, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionParams {
    pub tokens: u32,
    pub cap: u32,
    pub walk_length: Option<u32>,
    pub max_phases: Option<u32>,
}

impl Default for ReductionParams {
    fn default() -> Self {
        ReductionParams { tokens: 10, cap: 40, walk_length: None, max_phases: None }
    }
}

impl ReductionParams {
    pub fn validate(&self) -> Result<(), ExpanderError> {
        if self.tokens == 0 || self.tokens >= self.cap {
            return Err(ExpanderError::Params(format!(
                "need 0 < tokens < cap, got tokens={} cap={}",
                self.tokens, self.cap
            )));
        }
        Ok(())
    }

    /// The stricter ratio under which fewer than a tenth of the nodes can be
    /// full at once. The stock 10/40 setting does not meet it.
    pub fn bounds_full_nodes(&self) -> bool {
        10 * self.tokens < self.cap
    }

    pub fn degree_bound(&self) -> u32 {
        self.tokens + self.cap
    }

    pub fn walk_length_for(&self, n: usize) -> u32 {
        self.walk_length.unwrap_or(2 * ceil_log2(n as u64)).max(1)
    }

    pub fn max_phases_for(&self, n: usize) -> u32 {
        self.max_phases.unwrap_or(4 * ceil_log2(n as u64) + 8)
    }
}

/// A degree-reduction token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReductionToken {
    pub origin: NodeId,
    pub active: bool,
    pub resting_at: Option<NodeId>,
    at: NodeId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub attempts: u32,
    pub phases: u32,
    pub bridges: u32,
    /// Active tokens before each phase of the final attempt, then zero.
    pub active_history: Vec<u64>,
    /// Largest number of nodes holding at least `cap` tokens at a phase end.
    pub max_overloaded: u64,
    pub rounds: u64,
}

/// Reduces a connected expander to maximum degree `tokens + cap`.
///
/// A disconnected outcome is retried with fresh randomness twice; after that
/// the remaining pieces are chained through their lowest-degree nodes.
pub fn expander_degree_reduction<R: Rng + ?Sized>(
    g: &Subgraph,
    params: &ReductionParams,
    net: &mut Network,
    rng: &mut R,
) -> Result<(OverlayGraph, ReductionReport), ExpanderError> {
    params.validate()?;
    let n = g.len();
    let mut report = ReductionReport::default();
    if n <= 1 {
        return Ok((OverlayGraph::new(n), report));
    }
    if !g.graph.is_connected() {
        return Err(ExpanderError::Disconnected);
    }
    let began = net.rounds();
    let mut out = OverlayGraph::new(n);
    for _ in 0..3 {
        report.attempts += 1;
        report.active_history.clear();
        out = reduction_attempt(g, params, net, rng, &mut report)?;
        if out.is_connected() {
            break;
        }
    }
    let parts = connected_components(&out);
    if parts.count() > 1 {
        let anchors: Vec<NodeId> = parts
            .clusters
            .values()
            .map(|members| *members.iter().min_by_key(|&&v| (out.degree(v), v)).unwrap())
            .collect();
        for pair in anchors.windows(2) {
            out.add_edge(pair[0], pair[1]);
            report.bridges += 1;
        }
    }
    report.rounds = net.rounds() - began;
    let bound = params.degree_bound();
    if let Some(u) = out.nodes().find(|&u| out.degree(u) > bound) {
        return Err(ExpanderError::DegreeBound { node: g.global(u), degree: out.degree(u), bound });
    }
    Ok((out, report))
}

fn reduction_attempt<R: Rng + ?Sized>(
    g: &Subgraph,
    params: &ReductionParams,
    net: &mut Network,
    rng: &mut R,
    report: &mut ReductionReport,
) -> Result<OverlayGraph, ExpanderError> {
    let n = g.len();
    let walk = params.walk_length_for(n);
    let max_phases = params.max_phases_for(n);
    let cap = params.cap as usize;
    let view = WalkView::lazy(&g.graph, &g.labels);
    let mut tokens: Vec<ReductionToken> = g
        .graph
        .nodes()
        .flat_map(|u| (0..params.tokens).map(move |_| ReductionToken { origin: u, active: true, resting_at: None, at: u }))
        .collect();
    let mut resident = vec![0usize; n];
    let mut phase = 0;
    loop {
        let active: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i].active).collect();
        report.active_history.push(active.len() as u64);
        if active.is_empty() {
            break;
        }
        if phase == max_phases {
            return Err(ExpanderError::Unsatisfied { phases: phase, active: active.len() as u64 });
        }
        phase += 1;
        let walks = active
            .iter()
            .map(|&i| {
                let t = &tokens[i];
                WalkToken { at: t.at, ..WalkToken::new(t.origin, walk, i as u64, WalkKind::DegreeReduction) }
            })
            .collect();
        let moved = net.run_walks(walks, &view, TOKEN_PAYLOAD_BITS, rng)?;
        let mut arrivals = vec![Vec::new(); n];
        for (&i, w) in active.iter().zip(&moved.tokens) {
            tokens[i].at = w.at;
            arrivals[w.at.index()].push(i);
        }
        let mut overloaded = 0;
        let mut notices: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for (holder, arrived) in arrivals.iter().enumerate() {
            let total = resident[holder] + arrived.len();
            if total >= cap {
                overloaded += 1;
            }
            if total <= cap {
                resident[holder] = total;
                for &i in arrived {
                    let t = &mut tokens[i];
                    t.active = false;
                    t.resting_at = Some(t.at);
                    if t.origin.index() != holder {
                        notices[holder].push(t.origin);
                    }
                }
            }
        }
        report.max_overloaded = report.max_overloaded.max(overloaded);
        if net.faithful() {
            notify_origins(g, notices, net)?;
        }
    }
    report.phases = phase;
    let mut out = OverlayGraph::new(n);
    for t in &tokens {
        let holder = t.resting_at.expect("inactive token has a resting place");
        if holder != t.origin && !out.has_edge(holder, t.origin) {
            out.add_edge(holder, t.origin);
        }
    }
    Ok(out)
}

/// Each holder tells the origins of its newly settled tokens where they
/// rest, one message per round.
fn notify_origins(g: &Subgraph, mut notices: Vec<Vec<NodeId>>, net: &mut Network) -> Result<(), EngineError> {
    notices.iter_mut().for_each(|q| q.reverse());
    loop {
        let contacts: BTreeMap<NodeId, Outgoing> = notices
            .iter_mut()
            .enumerate()
            .filter_map(|(holder, q)| {
                let origin = q.pop()?;
                let src = g.labels[holder];
                Some((src, Outgoing { dst: g.global(origin), payload: src.0.to_le_bytes().to_vec(), reveals: vec![src] }))
            })
            .collect();
        if contacts.is_empty() {
            return Ok(());
        }
        net.run_round(&contacts, |_| None)?;
    }
}
