//! The staged overlay construction.
//!
//! Every stage starts from the clusters of the current overlay edge set.
//! Each cluster agrees on its minimum ID and a shared random string,
//! aggregates linear sketches of its members' adjacency in the input graph,
//! and samples one edge leaving the cluster. The sampled edges, thinned to
//! degree at most 4, join neighbouring clusters; every merged cluster is
//! then rebuilt into a bounded-degree expander. Stages repeat until a single
//! cluster remains.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineConfig, EngineError, Mode, Network, Outgoing, TrafficStats, WalkView};
use crate::expander::{
    create_expander, expander_degree_reduction, ExpanderError, ExpansionParams, ReductionParams,
};
use crate::graph::{
    connected_components, estimate_conductance, ClusterPartition, GraphError, NodeId, OverlayGraph, Subgraph,
};
use crate::pushsum::{aggregate_sketches, PushSumError, PushSumReport, PushSumSchedule, ScheduleConstants};
use crate::rng::{derive, stream};
use crate::sketch::{ceil_log2, SampledEdge, SketchError, SketchMatrix, SketchParams, SketchSeed};

const TAG_SEED: u64 = 2;
const TAG_SPREAD: u64 = 3;
const TAG_SAMPLE: u64 = 4;
const TAG_REBUILD: u64 = 5;
const TAG_OBSERVE: u64 = 6;

#[derive(Debug, Error)]
pub enum OverlayError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    PushSum(#[from] PushSumError),
    #[error(transparent)]
    Expander(#[from] ExpanderError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("stage {stage} failed twice: {reason}")]
    Observer { stage: u32, reason: String },
    #[error("{clusters} clusters remain after {stages} stages")]
    StageLimit { stages: u32, clusters: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayParams {
    /// Conductance floor the clusters are built for.
    pub phi: f64,
    pub c_g: f64,
    pub c_st: u32,
    pub sketch_retries: u32,
    pub sketch_failure: f64,
    pub observer_samples: usize,
    pub expansion: ExpansionParams,
    pub reduction: ReductionParams,
    pub schedule: ScheduleConstants,
}

impl Default for OverlayParams {
    fn default() -> Self {
        OverlayParams {
            phi: 0.1,
            c_g: 4.0,
            c_st: 8,
            sketch_retries: 3,
            sketch_failure: 0.25,
            observer_samples: 32,
            expansion: ExpansionParams::default(),
            reduction: ReductionParams::default(),
            schedule: ScheduleConstants::default(),
        }
    }
}

impl OverlayParams {
    pub fn validate(&self) -> Result<(), OverlayError> {
        if !(self.phi > 0.0 && self.phi <= 1.0) {
            return Err(OverlayError::Params(format!("phi must lie in (0, 1], got {}", self.phi)));
        }
        if !(self.sketch_failure > 0.0 && self.sketch_failure < 1.0) {
            return Err(OverlayError::Params(format!("sketch failure must lie in (0, 1), got {}", self.sketch_failure)));
        }
        if self.c_g <= 0.0 || self.c_st == 0 {
            return Err(OverlayError::Params("c_g and c_st must be positive".into()));
        }
        if self.expansion.walk_length == 0 {
            return Err(OverlayError::Params("expansion walk length must be positive".into()));
        }
        self.reduction.validate()?;
        Ok(())
    }

    /// Rounds of identity spreading for an `n`-node network.
    pub fn spread_rounds(&self, n: usize) -> u32 {
        if n <= 1 {
            return 0;
        }
        (self.c_g / self.phi * (n as f64).log2()).ceil() as u32
    }

    pub fn stage_limit(&self, n: usize) -> u32 {
        (self.c_st * ceil_log2(n as u64)).max(1)
    }
}

/// What a cluster agrees on in the first step of a stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterIdentity {
    pub min_id: NodeId,
    pub shared_random: SketchSeed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpreadOutcome {
    /// Indexed by the cluster's local IDs.
    pub identities: Vec<ClusterIdentity>,
    pub agreed: bool,
}

/// Push-style spreading of the smallest (ID, random string) pair over the
/// cluster's edges for `rounds` rounds.
///
/// `own` holds each node's starting pair, indexed by local ID.
pub fn spread_identity<R: Rng + ?Sized>(
    cluster: &Subgraph,
    own: Vec<ClusterIdentity>,
    rounds: u32,
    net: &mut Network,
    rng: &mut R,
) -> Result<SpreadOutcome, EngineError> {
    let k = cluster.len();
    if k <= 1 {
        return Ok(SpreadOutcome { identities: own, agreed: true });
    }
    let mut ids = own;
    if net.faithful() {
        let view = WalkView::plain(&cluster.graph, &cluster.labels);
        for _ in 0..rounds {
            let mut contacts = BTreeMap::new();
            let mut target = vec![usize::MAX; k];
            for u in cluster.graph.nodes() {
                let Some(v) = view.step(u, rng) else { continue };
                target[u.index()] = v.index();
                let id = &ids[u.index()];
                let mut payload = id.min_id.0.to_le_bytes().to_vec();
                for w in &id.shared_random.words {
                    payload.extend_from_slice(&w.to_le_bytes());
                }
                contacts.insert(cluster.global(u), Outgoing::new(cluster.global(v), payload));
            }
            net.run_round(&contacts, |_| None)?;
            let sent = ids.clone();
            for (u, &v) in target.iter().enumerate() {
                if v != usize::MAX && sent[u].min_id < ids[v].min_id {
                    ids[v] = sent[u].clone();
                }
            }
        }
    } else {
        let best = ids.iter().min_by_key(|id| id.min_id).cloned().unwrap();
        ids = vec![best; k];
        net.idle(rounds as u64);
    }
    let agreed = ids.iter().all(|id| id == &ids[0]);
    Ok(SpreadOutcome { identities: ids, agreed })
}

/// A sampled edge and the endpoint whose cluster sampled it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeOwnership {
    pub edge: (NodeId, NodeId),
    pub owner: NodeId,
}

impl EdgeOwnership {
    pub fn new(owner: NodeId, other: NodeId) -> Self {
        EdgeOwnership { edge: (owner, other), owner }
    }

    pub fn target(&self) -> NodeId {
        if self.edge.0 == self.owner {
            self.edge.1
        } else {
            self.edge.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundedEdges {
    /// Each edge once, as (smaller, larger).
    pub edges: Vec<(NodeId, NodeId)>,
    pub cycles: u64,
}

/// Thins owned edges so no node keeps more than 4.
///
/// A target with at least three owners pointing at it replaces those edges
/// by a cycle through itself and its owners in ascending ID order.
pub fn bound_degree(owned: &[EdgeOwnership]) -> Result<BoundedEdges, OverlayError> {
    let mut seen = BTreeSet::new();
    let mut incoming: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for e in owned {
        if !seen.insert(e.owner) {
            return Err(OverlayError::Params(format!("node {} owns more than one edge", e.owner)));
        }
        if e.target() == e.owner {
            return Err(OverlayError::Params(format!("node {} owns a loop", e.owner)));
        }
        incoming.entry(e.target()).or_default().push(e.owner);
    }
    let mut out = BTreeSet::new();
    let mut cycles = 0;
    let mut push = |a: NodeId, b: NodeId| {
        if a != b {
            out.insert((a.min(b), a.max(b)));
        }
    };
    for (&target, owners) in &incoming {
        if owners.len() >= 3 {
            cycles += 1;
            let mut ring: Vec<NodeId> = owners.clone();
            ring.push(target);
            ring.sort_unstable();
            for i in 0..ring.len() {
                push(ring[i], ring[(i + 1) % ring.len()]);
            }
        } else {
            for &o in owners {
                push(o, target);
            }
        }
    }
    Ok(BoundedEdges { edges: out.into_iter().collect(), cycles })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: u32,
    pub attempts: u32,
    pub clusters_before: usize,
    pub clusters_after: usize,
    pub spread_rounds: u32,
    pub sampled: u64,
    pub empty_cut_clusters: u64,
    pub failed_clusters: u64,
    pub sketch_retries: u64,
    pub owner_mismatches: u64,
    pub double_samples: u64,
    pub dropped_intra: u64,
    pub bounded_edges: u64,
    pub bounded_max_degree: u32,
    pub cycles: u64,
    pub rebuilt_clusters: u64,
    pub repaired_nodes: u64,
    pub reduction_bridges: u64,
    pub reduction_phases: u32,
    pub max_degree: u32,
    pub min_cluster_conductance: Option<f64>,
    pub rounds: u64,
    pub messages: u64,
    pub bits: u64,
    pub pushsum: PushSumReport,
    pub observer_notes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n: usize,
    /// Stages until the overlay first formed a single cluster.
    pub phases: u32,
    pub stages_run: u32,
    pub rounds: u64,
    pub messages: u64,
    pub replies: u64,
    pub bits: u64,
    pub max_initiations_per_round: u64,
    pub max_degree: u32,
    pub noop_drops: u64,
    pub stages: Vec<StageMetrics>,
    pub pushsum: PushSumReport,
    pub traffic: TrafficStats,
}

#[derive(Clone, Debug)]
pub struct OverlayOutcome {
    pub graph: OverlayGraph,
    pub metrics: RunMetrics,
    pub network: Network,
}

/// Runs the staged protocol on a connected graph whose IDs are `1..=n`.
pub fn build_overlay(g: &OverlayGraph, params: &OverlayParams, config: EngineConfig) -> Result<OverlayOutcome, OverlayError> {
    params.validate()?;
    let n = g.node_count();
    if n == 0 {
        return Err(GraphError::TooSmall.into());
    }
    if !g.is_connected() {
        return Err(GraphError::Disconnected { components: connected_components(g).count() }.into());
    }
    let seed = config.seed;
    let mode = config.mode;
    let mut net = Network::new(config, g);
    let mut metrics = RunMetrics { n, ..Default::default() };
    let mut prev = OverlayGraph::new(n);
    if n > 1 {
        let limit = params.stage_limit(n);
        let mut single_at = None;
        for stage in 1..=limit {
            let parts = connected_components(&prev);
            if parts.count() == 1 && mode == Mode::Fast {
                break;
            }
            let began = net.stats();
            let mut attempt = 0;
            let mut notes = Vec::new();
            let result = loop {
                match run_stage(g, &prev, &parts, params, &mut net, seed, stage, attempt)? {
                    Ok(r) => break r,
                    Err(reason) if attempt == 0 => {
                        attempt += 1;
                        notes.push(reason);
                    }
                    Err(reason) => return Err(OverlayError::Observer { stage, reason }),
                }
            };
            let ended = net.stats();
            let mut m = result.metrics;
            m.observer_notes.splice(0..0, notes);
            m.stage = stage;
            m.attempts = attempt + 1;
            m.rounds = ended.rounds_elapsed - began.rounds_elapsed;
            m.messages = ended.messages_initiated - began.messages_initiated;
            m.bits = ended.total_bits - began.total_bits;
            metrics.pushsum.absorb(&m.pushsum);
            metrics.stages.push(m);
            metrics.stages_run = stage;
            if result.detected_single {
                break;
            }
            let mut drop: Vec<(NodeId, NodeId)> = prev
                .edges()
                .filter(|&(u, v, _)| !result.next.has_edge(u, v))
                .map(|(u, v, _)| (u, v))
                .collect();
            if stage == 1 {
                drop.extend(g.edges().filter(|&(u, v, _)| !result.next.has_edge(u, v)).map(|(u, v, _)| (u, v)));
            }
            let add: Vec<(NodeId, NodeId)> = result
                .next
                .edges()
                .filter(|&(u, v, _)| !prev.has_edge(u, v))
                .map(|(u, v, _)| (u, v))
                .collect();
            net.set_label("reconfigure");
            net.reconfigure(&add, &drop)?;
            prev = result.next;
            if single_at.is_none() && prev.is_connected() {
                single_at = Some(stage);
            }
        }
        if !prev.is_connected() {
            return Err(OverlayError::StageLimit { stages: limit, clusters: connected_components(&prev).count() });
        }
        metrics.phases = single_at.unwrap_or(0);
    }
    let traffic = net.stats();
    metrics.rounds = traffic.rounds_elapsed;
    metrics.messages = traffic.messages_initiated;
    metrics.replies = traffic.messages_replied;
    metrics.bits = traffic.total_bits;
    metrics.max_initiations_per_round = traffic.max_initiations_per_round;
    metrics.max_degree = prev.max_degree();
    metrics.noop_drops = net.noop_drops();
    metrics.traffic = traffic;
    let bound = params.reduction.degree_bound();
    assert!(metrics.max_degree <= bound, "overlay degree {} above {}", metrics.max_degree, bound);
    Ok(OverlayOutcome { graph: prev, metrics, network: net })
}

struct StageResult {
    next: OverlayGraph,
    detected_single: bool,
    metrics: StageMetrics,
}

enum ClusterSample {
    Sampled(EdgeOwnership),
    Empty,
    Nothing,
}

struct SampleReport {
    sample: ClusterSample,
    retries: u64,
    mismatches: u64,
    pushsum: PushSumReport,
}

/// One attempt at a stage. The inner error carries an observer complaint
/// that warrants a retry; the outer one is a hard failure.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    g: &OverlayGraph,
    prev: &OverlayGraph,
    parts: &ClusterPartition,
    params: &OverlayParams,
    net: &mut Network,
    seed: u64,
    stage: u32,
    attempt: u32,
) -> Result<Result<StageResult, String>, OverlayError> {
    let n = g.node_count();
    let st = stage as u64;
    let at = attempt as u64;
    let mut m = StageMetrics { clusters_before: parts.count(), ..Default::default() };
    let subs: Vec<Subgraph> = parts.clusters.values().map(|members| prev.subgraph(members)).collect();

    let t_g = params.spread_rounds(n);
    m.spread_rounds = t_g;
    net.set_label("spread");
    let spreads = net.parallel(subs.iter().collect(), |net, sub: &Subgraph| {
        let own = sub
            .labels
            .iter()
            .map(|&v| ClusterIdentity {
                min_id: v,
                shared_random: SketchSeed::random(n as u64, &mut stream(seed, &[TAG_SEED, st, at, v.0 as u64])),
            })
            .collect();
        let mut rng = stream(seed, &[TAG_SPREAD, st, at, sub.labels[0].0 as u64]);
        spread_identity(sub, own, t_g, net, &mut rng)
    })?;
    if let Some((sub, _)) = subs.iter().zip(&spreads).find(|(_, s)| !s.agreed) {
        return Ok(Err(format!("cluster of {} did not agree on its identity", sub.labels[0])));
    }

    let sketch_params = SketchParams::with_failure(n as u64, params.sketch_failure);
    let schedule = PushSumSchedule::for_sketches(n, &params.schedule);
    net.set_label("sample");
    let reports = net.parallel(subs.iter().zip(&spreads).collect(), |net, (sub, spread)| {
        let mut rng = stream(seed, &[TAG_SAMPLE, st, at, sub.labels[0].0 as u64]);
        sample_cluster(g, sub, &spread.identities[0], &sketch_params, &schedule, params, net, &mut rng)
    })?;

    let mut chosen: BTreeMap<(NodeId, NodeId), (NodeId, EdgeOwnership)> = BTreeMap::new();
    for (sub, r) in subs.iter().zip(reports) {
        m.sketch_retries += r.retries;
        m.owner_mismatches += r.mismatches;
        m.pushsum.absorb(&r.pushsum);
        match r.sample {
            ClusterSample::Empty => m.empty_cut_clusters += 1,
            ClusterSample::Nothing => m.failed_clusters += 1,
            ClusterSample::Sampled(own) => {
                m.sampled += 1;
                let (u, v) = own.edge;
                let key = (u.min(v), u.max(v));
                let min_id = sub.labels[0];
                match chosen.get(&key) {
                    Some(&(other_min, _)) => {
                        m.double_samples += 1;
                        if min_id < other_min {
                            chosen.insert(key, (min_id, own));
                        }
                    }
                    None => {
                        chosen.insert(key, (min_id, own));
                    }
                }
            }
        }
    }
    if m.empty_cut_clusters == parts.count() as u64 {
        m.clusters_after = parts.count();
        m.max_degree = prev.max_degree();
        return Ok(Ok(StageResult { next: prev.clone(), detected_single: true, metrics: m }));
    }

    // Owners ask the far endpoint for its cluster's minimum ID; equal IDs
    // mean the edge never left the cluster.
    let owned: Vec<EdgeOwnership> = chosen.into_values().map(|(_, e)| e).collect();
    net.set_label("exchange");
    let contacts: BTreeMap<NodeId, Outgoing> = owned
        .iter()
        .map(|e| (e.owner, Outgoing::new(e.target(), parts.label_of(e.owner).0.to_le_bytes().to_vec())))
        .collect();
    if net.faithful() {
        net.run_round(&contacts, |msg| Some(Outgoing::new(msg.src, parts.label_of(msg.dst).0.to_le_bytes().to_vec())))?;
    } else {
        net.idle(1);
    }
    let survivors: Vec<EdgeOwnership> =
        owned.into_iter().filter(|e| parts.label_of(e.owner) != parts.label_of(e.target())).collect();
    m.dropped_intra = contacts.len() as u64 - survivors.len() as u64;

    let bounded = bound_degree(&survivors)?;
    m.cycles = bounded.cycles;
    m.bounded_edges = bounded.edges.len() as u64;
    let eb = OverlayGraph::simple_from_edges(n, bounded.edges.iter().copied());
    m.bounded_max_degree = eb.max_degree();
    assert!(m.bounded_max_degree <= 4, "bounded edge set has degree {}", m.bounded_max_degree);
    let parts_b = connected_components(&eb);
    for e in &survivors {
        assert_eq!(parts_b.label_of(e.owner), parts_b.label_of(e.target()), "bounding split a sampled edge");
    }
    net.set_label("bound");
    if net.faithful() {
        // Owners of a cycled target learn their two ring neighbours in the reply.
        let contacts: BTreeMap<NodeId, Outgoing> =
            survivors.iter().map(|e| (e.owner, Outgoing::new(e.target(), vec![0u8; 4]))).collect();
        net.run_round(&contacts, |msg| {
            let ring: Vec<NodeId> = eb.neighbor_ids(msg.src).filter(|&x| x != msg.dst).collect();
            let payload = ring.iter().flat_map(|x| x.0.to_le_bytes()).collect();
            Some(Outgoing { dst: msg.src, payload, reveals: ring })
        })?;
    } else {
        net.idle(1);
    }

    // Step 3: rebuild every cluster that gained an edge.
    let mut union = prev.clone();
    for &(u, v) in &bounded.edges {
        if !union.has_edge(u, v) {
            union.add_edge(u, v);
        }
    }
    let merged = connected_components(&union);
    let touched: BTreeSet<NodeId> = bounded.edges.iter().map(|&(u, _)| merged.label_of(u)).collect();
    let mut next = OverlayGraph::new(n);
    for (label, members) in &merged.clusters {
        if !touched.contains(label) {
            for &u in members {
                for (v, _) in prev.neighbors(u) {
                    if u < v {
                        next.add_edge(u, v);
                    }
                }
            }
        }
    }
    let rebuild: Vec<Subgraph> = touched.iter().map(|l| union.subgraph(merged.members(*l))).collect();
    m.rebuilt_clusters = rebuild.len() as u64;
    net.set_label("rebuild");
    let rebuilt = net.parallel(rebuild.iter().collect(), |net, sub: &Subgraph| {
        let mut rng = stream(seed, &[TAG_REBUILD, st, at, sub.labels[0].0 as u64]);
        let d = sub.graph.max_degree();
        let (h, created) = create_expander(sub, params.phi, d, &params.expansion, net, &mut rng)?;
        let h = Subgraph { graph: h, labels: sub.labels.clone() };
        let (out, reduced) = expander_degree_reduction(&h, &params.reduction, net, &mut rng)?;
        Ok::<_, OverlayError>((out, created, reduced))
    })?;
    for (sub, (out, created, reduced)) in rebuild.iter().zip(&rebuilt) {
        m.repaired_nodes += created.iterations.iter().map(|it| it.repaired_nodes).sum::<u64>();
        m.reduction_bridges += reduced.bridges as u64;
        m.reduction_phases = m.reduction_phases.max(reduced.phases);
        for (u, v, _) in out.edges() {
            next.add_edge(sub.global(u), sub.global(v));
        }
    }

    // Observer.
    let after = connected_components(&next);
    m.clusters_after = after.count();
    m.max_degree = next.max_degree();
    if !parts.is_refined_by(&after) {
        return Ok(Err("a cluster split".into()));
    }
    let bound = params.reduction.degree_bound();
    if m.max_degree > bound {
        return Ok(Err(format!("degree {} above {}", m.max_degree, bound)));
    }
    let floor = params.phi / 2.0;
    for sub in &rebuild {
        let local = next.subgraph(&sub.labels);
        let obs_seed = derive(seed, &[TAG_OBSERVE, st, at, sub.labels[0].0 as u64]);
        let phi = estimate_conductance(&local.graph, params.observer_samples, obs_seed)?;
        m.min_cluster_conductance = Some(m.min_cluster_conductance.map_or(phi, |x: f64| x.min(phi)));
        if phi < floor {
            m.observer_notes.push(format!("cluster of {} estimated at {:.3}", sub.labels[0], phi));
            return Ok(Err(format!("cluster of {} has estimated conductance {:.3} below {:.3}", sub.labels[0], phi, floor)));
        }
    }
    Ok(Ok(StageResult { next, detected_single: false, metrics: m }))
}

/// Sketches the cluster's adjacency in `g`, aggregates, and samples an
/// outgoing edge, retrying with derived seeds.
#[allow(clippy::too_many_arguments)]
fn sample_cluster<R: Rng + ?Sized>(
    g: &OverlayGraph,
    sub: &Subgraph,
    identity: &ClusterIdentity,
    sketch_params: &SketchParams,
    schedule: &PushSumSchedule,
    params: &OverlayParams,
    net: &mut Network,
    rng: &mut R,
) -> Result<SampleReport, OverlayError> {
    let mut report = SampleReport { sample: ClusterSample::Nothing, retries: 0, mismatches: 0, pushsum: PushSumReport::default() };
    let k = sub.len();
    for attempt in 0..=params.sketch_retries {
        if attempt > 0 {
            report.retries += 1;
        }
        let matrix = SketchMatrix::new(*sketch_params, &identity.shared_random.retry(attempt));
        let inputs: Vec<_> = sub.labels.iter().map(|&v| matrix.sketch_node(v, g.neighbor_ids(v))).collect();
        let outputs = if net.faithful() && k > 1 {
            let out = aggregate_sketches(sub, identity.min_id, &inputs, sketch_params, schedule, net, rng)?;
            report.pushsum.absorb(&out.report);
            out.outputs
        } else {
            let mut sum = inputs[0].clone();
            for s in &inputs[1..] {
                sum.merge_in(s)?;
            }
            if k > 1 {
                net.idle(schedule.phases as u64 * schedule.rounds_per_phase as u64);
            }
            vec![Some(sum); k]
        };
        let Some(leader) = &outputs[0] else { continue };
        match matrix.sample_cut_edge(leader)? {
            SampledEdge::EmptyCut => {
                report.sample = ClusterSample::Empty;
                return Ok(report);
            }
            SampledEdge::Failure => continue,
            SampledEdge::Edge(a, b) => {
                let inside = |x: NodeId| sub.labels.binary_search(&x).ok();
                let owner = match (inside(a), inside(b)) {
                    (Some(i), None) => Some((i, a, b)),
                    (None, Some(i)) => Some((i, b, a)),
                    _ => None,
                };
                let Some((local, owner, other)) = owner else { continue };
                if outputs[local].as_ref() != Some(leader) {
                    report.mismatches += 1;
                    continue;
                }
                report.sample = ClusterSample::Sampled(EdgeOwnership::new(owner, other));
                return Ok(report);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Mode;

    fn ids(pairs: &[(u32, u32)]) -> Vec<(NodeId, NodeId)> {
        pairs.iter().map(|&(a, b)| (NodeId(a), NodeId(b))).collect()
    }

    fn identity(v: u32) -> ClusterIdentity {
        ClusterIdentity { min_id: NodeId(v), shared_random: SketchSeed { words: vec![v as u64] } }
    }

    #[test]
    fn singleton_spread_is_free() {
        let sub = Subgraph::whole(OverlayGraph::new(1));
        let g = OverlayGraph::new(1);
        let mut net = Network::new(EngineConfig::new(0, Mode::Faithful, 2), &g);
        let out = spread_identity(&sub, vec![identity(1)], 10, &mut net, &mut stream(0, &[])).unwrap();
        assert!(out.agreed);
        assert_eq!(net.rounds(), 0);
    }

    #[test]
    fn pair_agrees_after_one_round() {
        let g = OverlayGraph::from_edges(9, ids(&[(5, 9)]));
        let sub = g.subgraph(&[NodeId(5), NodeId(9)]);
        let mut net = Network::new(EngineConfig::new(0, Mode::Faithful, 9), &g);
        let out = spread_identity(&sub, vec![identity(5), identity(9)], 1, &mut net, &mut stream(3, &[])).unwrap();
        assert!(out.agreed);
        assert_eq!(out.identities[1], identity(5));
    }

    #[test]
    fn single_owned_edge_passes_through() {
        let b = bound_degree(&[EdgeOwnership::new(NodeId(3), NodeId(1))]).unwrap();
        assert_eq!(b.edges, vec![(NodeId(1), NodeId(3))]);
        assert_eq!(b.cycles, 0);
    }

    #[test]
    fn five_owners_form_a_ring() {
        let owned: Vec<_> = (2..=6).map(|o| EdgeOwnership::new(NodeId(o), NodeId(1))).collect();
        let b = bound_degree(&owned).unwrap();
        let g = OverlayGraph::simple_from_edges(6, b.edges.iter().copied());
        assert_eq!(g.degree(NodeId(1)), 2);
        assert!(g.nodes().all(|u| g.degree(u) <= 2));
        assert!(g.is_connected());
        assert_eq!(b.cycles, 1);
    }

    #[test]
    fn two_owned_edges_per_node_rejected() {
        let owned = [EdgeOwnership::new(NodeId(1), NodeId(2)), EdgeOwnership::new(NodeId(1), NodeId(3))];
        assert!(bound_degree(&owned).is_err());
    }

    #[test]
    fn two_nodes_one_stage() {
        let g = OverlayGraph::from_edges(2, ids(&[(1, 2)]));
        for mode in [Mode::Fast, Mode::Faithful] {
            let out = build_overlay(&g, &OverlayParams::default(), EngineConfig::new(5, mode, 2)).unwrap();
            assert_eq!(out.metrics.phases, 1);
            assert!(out.graph.has_edge(NodeId(1), NodeId(2)));
            assert_eq!(out.graph.edge_count(), 1);
        }
    }

    #[test]
    fn singleton_needs_no_stage() {
        let out = build_overlay(&OverlayGraph::new(1), &OverlayParams::default(), EngineConfig::new(5, Mode::Fast, 2)).unwrap();
        assert_eq!(out.metrics.phases, 0);
        assert_eq!(out.metrics.stages_run, 0);
    }
}
