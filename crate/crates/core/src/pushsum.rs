//! Exact aggregation of sketch vectors inside a cluster by Push-Sum.
//!
//! Sketch fields are split into signed 16-bit limbs so every pushed entry
//! lives in a small integer range; the field sums are reassembled from the
//! rounded limb sums afterwards. Each limb vector is further split into a
//! nonnegative and a nonpositive part, and all values are fixed-point with 64
//! fractional bits. Halving rounds down and the kept half absorbs the
//! remainder, so mass is conserved bit-exactly.
//!
//! Only the cluster's minimum-ID node starts with weight. In every phase each
//! node keeps half of its (weight, values) and sends the other half to a peer
//! found by a lazy random walk. After the last phase every node divides its
//! values by its weight and rounds to the nearest integer.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Network, WalkKind, WalkToken, WalkView};
use crate::graph::{NodeId, OverlayGraph, Subgraph};
use crate::rng::derive;
use crate::sketch::{ceil_log2, to_field, Cell, SketchError, SketchParams, SketchVector};

pub const LIMB_BITS: u32 = 16;
pub const FRAC_BITS: u32 = 64;
const LIMB_MAX: i64 = (1 << LIMB_BITS) - 1;
const ONE: i128 = 1 << FRAC_BITS;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PushSumError {
    #[error("cluster is empty")]
    EmptyCluster,
    #[error("cluster edges do not connect the cluster")]
    Disconnected,
    #[error("expected {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("node {0} is not in the cluster")]
    NotInCluster(NodeId),
    #[error("input of node {0} is outside the representable range")]
    InputRange(NodeId),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Multipliers of the phase count, phase length and walk length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConstants {
    pub c_s: f64,
    pub c_p: f64,
    pub c_w: f64,
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        ScheduleConstants { c_s: 1.0, c_p: 2.0, c_w: 6.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushSumSchedule {
    pub phases: u32,
    pub rounds_per_phase: u32,
    pub walk_length: u32,
    pub peer_attempts: u32,
}

impl PushSumSchedule {
    /// Schedule for `n` nodes whose entries span a range of width `width`.
    pub fn new(n: usize, width: u64, c: &ScheduleConstants) -> Self {
        let log_n = (n.max(2) as f64).log2();
        let log_nx = (n.max(2) as f64 * width.max(2) as f64).log2();
        let ceil_log = ceil_log2(n.max(2) as u64);
        PushSumSchedule {
            phases: (c.c_s * log_n * log_nx).ceil() as u32,
            rounds_per_phase: (c.c_p * (ceil_log * ceil_log) as f64).ceil() as u32,
            walk_length: (c.c_w * log_n).ceil() as u32,
            peer_attempts: 2 * ceil_log + 2,
        }
    }

    /// Schedule for aggregating sketches of the given shape.
    pub fn for_sketches(n: usize, c: &ScheduleConstants) -> Self {
        Self::new(n, LimbLayout::range_width(), c)
    }
}

/// How sketch fields map to limb entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LimbLayout {
    pub count_limbs: usize,
    pub index_limbs: usize,
    pub fingerprint_limbs: usize,
    pub cells: usize,
    id_bound: u64,
}

fn limbs_for(max_abs: u128) -> usize {
    let bits = 128 - max_abs.leading_zeros();
    (bits.div_ceil(LIMB_BITS) as usize).max(1)
}

impl LimbLayout {
    /// Sized for single-node sketches, whose fields are bounded by the
    /// node's degree.
    pub fn new(params: &SketchParams) -> Self {
        let n = params.id_bound as u128;
        let pairs = n * (n - 1) / 2;
        LimbLayout {
            count_limbs: limbs_for(n - 1),
            index_limbs: limbs_for((n - 1) * pairs.saturating_sub(1).max(1)),
            fingerprint_limbs: limbs_for(crate::sketch::FIELD as u128 - 1),
            cells: params.cells(),
            id_bound: params.id_bound,
        }
    }

    pub fn per_cell(&self) -> usize {
        self.count_limbs + self.index_limbs + self.fingerprint_limbs
    }

    pub fn entries(&self) -> usize {
        self.cells * self.per_cell()
    }

    /// Width of the range a single limb entry lives in.
    pub fn range_width() -> u64 {
        2 * LIMB_MAX as u64
    }

    /// Largest magnitude a limb sum over up to `id_bound` nodes can have.
    pub fn sum_bound(&self) -> i128 {
        self.id_bound as i128 * LIMB_MAX as i128
    }

    fn push_limbs(out: &mut Vec<i64>, v: i128, limbs: usize) -> bool {
        let sign: i64 = if v < 0 { -1 } else { 1 };
        let mut a = v.unsigned_abs();
        for _ in 0..limbs {
            out.push(sign * (a & LIMB_MAX as u128) as i64);
            a >>= LIMB_BITS;
        }
        a == 0
    }

    /// Signed limb digits of every field; `None` when a field does not fit.
    pub fn encode(&self, s: &SketchVector) -> Option<Vec<i64>> {
        let mut out = Vec::with_capacity(self.entries());
        for c in &s.cells {
            let ok = Self::push_limbs(&mut out, c.count as i128, self.count_limbs)
                & Self::push_limbs(&mut out, c.index_sum, self.index_limbs)
                & Self::push_limbs(&mut out, c.fingerprint as i128, self.fingerprint_limbs);
            if !ok {
                return None;
            }
        }
        Some(out)
    }

    fn join(limbs: &[i128]) -> i128 {
        limbs.iter().rev().fold(0i128, |acc, &d| (acc << LIMB_BITS) + d)
    }

    /// Reassembles a sketch from per-limb sums.
    pub fn decode(&self, sums: &[i128], template: &SketchVector) -> SketchVector {
        let per = self.per_cell();
        let cells = sums
            .chunks_exact(per)
            .map(|c| {
                let (count, rest) = c.split_at(self.count_limbs);
                let (index, fp) = rest.split_at(self.index_limbs);
                Cell {
                    count: Self::join(count) as i64,
                    index_sum: Self::join(index),
                    fingerprint: to_field(Self::join(fp)),
                }
            })
            .collect();
        SketchVector { tag: template.tag, reps: template.reps, levels: template.levels, cells }
    }
}

/// One node's Push-Sum state in fixed point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PushSumState {
    pub weight: i128,
    pub pos: Vec<i128>,
    pub neg: Vec<i128>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushSumReport {
    pub runs: u64,
    pub phases: u64,
    pub rounds: u64,
    pub phase_overruns: u64,
    pub fallback_peers: u64,
    pub clamped_entries: u64,
    pub unreached_nodes: u64,
    pub conservation_violations: u64,
    pub sign_violations: u64,
    pub payload_bits: u64,
}

impl PushSumReport {
    pub fn absorb(&mut self, o: &PushSumReport) {
        self.runs += o.runs;
        self.phases += o.phases;
        self.rounds += o.rounds;
        self.phase_overruns += o.phase_overruns;
        self.fallback_peers += o.fallback_peers;
        self.clamped_entries += o.clamped_entries;
        self.unreached_nodes += o.unreached_nodes;
        self.conservation_violations += o.conservation_violations;
        self.sign_violations += o.sign_violations;
        self.payload_bits = self.payload_bits.max(o.payload_bits);
    }
}

#[derive(Clone, Debug)]
pub struct AggregateOutcome {
    /// Per local node; `None` if the node never received weight.
    pub outputs: Vec<Option<SketchVector>>,
    pub report: PushSumReport,
}

/// Bits of one (weight, pos, neg) message.
pub fn payload_bits(layout: &LimbLayout) -> u64 {
    128 * (2 * layout.entries() as u64 + 1) + 64
}

/// Aggregates the sketches of a cluster so every node ends with the sum.
///
/// `inputs` are indexed by the local IDs of `cluster`.
pub fn aggregate_sketches<R: Rng + ?Sized>(
    cluster: &Subgraph,
    min_id: NodeId,
    inputs: &[SketchVector],
    params: &SketchParams,
    schedule: &PushSumSchedule,
    net: &mut Network,
    rng: &mut R,
) -> Result<AggregateOutcome, PushSumError> {
    let k = cluster.len();
    if k == 0 {
        return Err(PushSumError::EmptyCluster);
    }
    if inputs.len() != k {
        return Err(PushSumError::InputCount { expected: k, got: inputs.len() });
    }
    let start = cluster.labels.binary_search(&min_id).map_err(|_| PushSumError::NotInCluster(min_id))?;
    for s in &inputs[1..] {
        inputs[0].merge(s).map(|_| ())?;
    }
    let mut report = PushSumReport { runs: 1, ..Default::default() };
    if k == 1 {
        return Ok(AggregateOutcome { outputs: vec![Some(inputs[0].clone())], report });
    }
    if !cluster.graph.is_connected() {
        return Err(PushSumError::Disconnected);
    }

    let layout = LimbLayout::new(params);
    let e = layout.entries();
    let bits = payload_bits(&layout);
    report.payload_bits = bits;
    let mut w = vec![0i128; k];
    let mut pos = vec![0i128; k * e];
    let mut neg = vec![0i128; k * e];
    w[start] = ONE;
    for (u, s) in inputs.iter().enumerate() {
        let digits = layout.encode(s).ok_or(PushSumError::InputRange(cluster.labels[u]))?;
        for (j, d) in digits.into_iter().enumerate() {
            if d > 0 {
                pos[u * e + j] = (d as i128) << FRAC_BITS;
            } else {
                neg[u * e + j] = (d as i128) << FRAC_BITS;
            }
        }
    }
    let pos_mass = column_sums(&pos, k, e);
    let neg_mass = column_sums(&neg, k, e);

    let lazy = WalkView::lazy(&cluster.graph, &cluster.labels);
    let plain = WalkView::plain(&cluster.graph, &cluster.labels);
    let clock = net.rounds();
    let mut next_w = vec![0i128; k];
    let mut next_pos = vec![0i128; k * e];
    let mut next_neg = vec![0i128; k * e];
    for phase in 0..schedule.phases {
        let began = net.rounds();
        let (dest, fallbacks) = choose_peers(k, phase, &lazy, &plain, schedule, bits, net, rng)?;
        report.fallback_peers += fallbacks;

        next_w.iter_mut().for_each(|x| *x = 0);
        next_pos.iter_mut().for_each(|x| *x = 0);
        next_neg.iter_mut().for_each(|x| *x = 0);
        for u in 0..k {
            let d = dest[u];
            let half = w[u] >> 1;
            next_w[u] += w[u] - half;
            next_w[d] += half;
            for j in 0..e {
                let (p, q) = (pos[u * e + j], neg[u * e + j]);
                let (hp, hq) = (p >> 1, q >> 1);
                next_pos[u * e + j] += p - hp;
                next_pos[d * e + j] += hp;
                next_neg[u * e + j] += q - hq;
                next_neg[d * e + j] += hq;
            }
        }
        std::mem::swap(&mut w, &mut next_w);
        std::mem::swap(&mut pos, &mut next_pos);
        std::mem::swap(&mut neg, &mut next_neg);

        if w.iter().sum::<i128>() != ONE
            || column_sums(&pos, k, e) != pos_mass
            || column_sums(&neg, k, e) != neg_mass
        {
            report.conservation_violations += 1;
        }
        if pos.iter().any(|&x| x < 0) || neg.iter().any(|&x| x > 0) || w.iter().any(|&x| x < 0) {
            report.sign_violations += 1;
        }

        let used = net.rounds() - began;
        let budget = schedule.rounds_per_phase as u64;
        if used < budget {
            net.idle(budget - used);
        } else if used > budget {
            report.phase_overruns += 1;
        }
        report.phases += 1;
    }
    report.rounds = net.rounds() - clock;

    let bound = layout.sum_bound();
    let mut outputs = Vec::with_capacity(k);
    for u in 0..k {
        if w[u] == 0 {
            report.unreached_nodes += 1;
            outputs.push(None);
            continue;
        }
        let mut sums = Vec::with_capacity(e);
        for j in 0..e {
            let p = round_ratio(pos[u * e + j], w[u]);
            let q = -round_ratio(-neg[u * e + j], w[u]);
            let (pc, qc) = (p.clamp(0, bound), q.clamp(-bound, 0));
            report.clamped_entries += (pc != p) as u64 + (qc != q) as u64;
            sums.push(pc + qc);
        }
        outputs.push(Some(layout.decode(&sums, &inputs[0])));
    }
    Ok(AggregateOutcome { outputs, report })
}

fn column_sums(values: &[i128], k: usize, e: usize) -> Vec<i128> {
    let mut out = vec![0i128; e];
    for u in 0..k {
        for (acc, v) in out.iter_mut().zip(&values[u * e..(u + 1) * e]) {
            *acc += v;
        }
    }
    out
}

/// Nearest integer to `x / w` for `x >= 0`, `w > 0`, both fixed point.
fn round_ratio(x: i128, w: i128) -> i128 {
    (2 * x + w) / (2 * w)
}

/// Picks one peer per node for a phase via lazy walks that must end away
/// from home, falling back to a uniform neighbor.
#[allow(clippy::too_many_arguments)]
fn choose_peers<R: Rng + ?Sized>(
    k: usize,
    phase: u32,
    lazy: &WalkView,
    plain: &WalkView,
    schedule: &PushSumSchedule,
    bits: u64,
    net: &mut Network,
    rng: &mut R,
) -> Result<(Vec<usize>, u64), PushSumError> {
    let mut dest = vec![usize::MAX; k];
    let mut pending: Vec<usize> = (0..k).collect();
    for attempt in 0..schedule.peer_attempts {
        if pending.is_empty() {
            break;
        }
        let tokens = pending
            .iter()
            .map(|&u| {
                let tag = derive(phase as u64, &[attempt as u64, u as u64]);
                WalkToken::new(NodeId::from_index(u), schedule.walk_length, tag, WalkKind::PushsumSample)
            })
            .collect();
        let out = net.run_walks(tokens, lazy, bits, rng)?;
        pending.clear();
        for t in out.tokens {
            if t.at != t.origin {
                dest[t.origin.index()] = t.at.index();
            } else {
                pending.push(t.origin.index());
            }
        }
    }
    let fallbacks = pending.len() as u64;
    if !pending.is_empty() {
        let tokens = pending
            .iter()
            .map(|&u| WalkToken::new(NodeId::from_index(u), 1, u as u64, WalkKind::PushsumSample))
            .collect();
        for t in net.run_walks(tokens, plain, bits, rng)?.tokens {
            dest[t.origin.index()] = t.at.index();
        }
    }
    Ok((dest, fallbacks))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeerSample {
    pub peer: NodeId,
    pub attempts: u32,
    pub fell_back: bool,
}

/// Samples a peer of `node` by lazy walks on `cluster_edges`, retrying while
/// the walk ends at `node`.
pub fn sample_peer<R: Rng + ?Sized>(
    node: NodeId,
    cluster_edges: &OverlayGraph,
    walk_length: u32,
    rng: &mut R,
) -> Result<PeerSample, PushSumError> {
    let n = cluster_edges.node_count();
    if !cluster_edges.contains(node) {
        return Err(PushSumError::NotInCluster(node));
    }
    if n < 2 || cluster_edges.degree(node) == 0 {
        return Err(PushSumError::Disconnected);
    }
    let labels: Vec<NodeId> = cluster_edges.nodes().collect();
    let lazy = WalkView::lazy(cluster_edges, &labels);
    let attempts = 2 * ceil_log2(n as u64) + 2;
    for attempt in 1..=attempts {
        let mut at = node;
        for _ in 0..walk_length {
            at = lazy.step(at, rng).ok_or(PushSumError::Disconnected)?;
        }
        if at != node {
            return Ok(PeerSample { peer: at, attempts: attempt, fell_back: false });
        }
    }
    let peer = WalkView::plain(cluster_edges, &labels).step(node, rng).ok_or(PushSumError::Disconnected)?;
    Ok(PeerSample { peer, attempts, fell_back: true })
}
