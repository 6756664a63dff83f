//! Synchronous gossip rounds with message accounting.
//!
//! Every node may initiate one message per round, receive any number, and
//! answer each received message with one reply. Links can be added between
//! nodes that know each other's IDs. Random walks are scheduled on top of
//! rounds: each node forwards at most one token per round, preferring tokens
//! that have taken the fewest steps.
//!
//! In fast mode rounds still advance but nothing is counted and walks move
//! step-synchronously.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, OverlayGraph};
use crate::rng::mix64;
use crate::sketch::ceil_log2;

/// Scale factor in the default message bound `c * max(ceil(log2 N), 4)^2`.
pub const MESSAGE_CONSTANT: u64 = 16_384;

/// Bits charged per walk hop on top of the payload: origin ID and step count.
pub const WALK_HEADER_BITS: u64 = 64;

pub fn default_b_max(id_bound: u64) -> u64 {
    let log = ceil_log2(id_bound).max(4) as u64;
    MESSAGE_CONSTANT * log * log
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Faithful,
    Fast,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "faithful" => Ok(Mode::Faithful),
            "fast" => Ok(Mode::Fast),
            other => Err(format!("unknown mode {other:?}, expected faithful or fast")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub seed: u64,
    pub b_max_bits: u64,
    pub mode: Mode,
    pub max_rounds: u64,
    pub trace: bool,
}

impl EngineConfig {
    pub fn new(seed: u64, mode: Mode, id_bound: u64) -> Self {
        EngineConfig { seed, b_max_bits: default_b_max(id_bound), mode, max_rounds: 1 << 32, trace: false }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("message of {bits} bits exceeds the {limit}-bit bound")]
    Oversize { bits: u64, limit: u64 },
    #[error("node {src} does not know node {dst}")]
    UnknownContact { src: NodeId, dst: NodeId },
    #[error("node {0} is not part of the network")]
    NoSuchNode(NodeId),
    #[error("token from {origin} is stuck on node {at} with no incident slots")]
    StuckToken { origin: NodeId, at: NodeId },
    #[error("round budget of {0} exhausted")]
    RoundLimit(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Initiate,
    Reply,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundMessage {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
    pub bit_size: u64,
}

/// A message a node wants to send. `reveals` lists the IDs the payload
/// carries, so the receiver's knowledge set can be updated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub dst: NodeId,
    pub payload: Vec<u8>,
    pub reveals: Vec<NodeId>,
}

impl Outgoing {
    pub fn new(dst: NodeId, payload: Vec<u8>) -> Self {
        Outgoing { dst, payload, reveals: Vec::new() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RoundOutcome {
    pub delivered: Vec<RoundMessage>,
    pub replies: Vec<RoundMessage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkKind {
    Expansion,
    DegreeReduction,
    PushsumSample,
}

/// A random-walk token. `origin` and `at` are local IDs of the walk view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WalkToken {
    pub origin: NodeId,
    pub at: NodeId,
    pub steps_taken: u32,
    pub steps_total: u32,
    pub payload: u64,
    pub kind: WalkKind,
}

impl WalkToken {
    pub fn new(origin: NodeId, steps_total: u32, payload: u64, kind: WalkKind) -> Self {
        WalkToken { origin, at: origin, steps_taken: 0, steps_total, payload, kind }
    }
}

/// Compact transition structure for walks on a local graph.
///
/// Each node has its real neighbor slots (one per unit of multiplicity)
/// followed by `loops` stay-put slots.
#[derive(Clone, Debug)]
pub struct WalkView {
    labels: Vec<NodeId>,
    offsets: Vec<usize>,
    slots: Vec<u32>,
    loops: Vec<u32>,
}

impl WalkView {
    /// Walks over `g` exactly as stored, loops included.
    pub fn new(g: &OverlayGraph, labels: &[NodeId]) -> Self {
        Self::build(g, labels, |u| g.loop_slots(u))
    }

    /// Lazy walks: every node stays put with probability one half.
    pub fn lazy(g: &OverlayGraph, labels: &[NodeId]) -> Self {
        Self::build(g, labels, |u| g.degree(u))
    }

    /// Walks over the real edges only.
    pub fn plain(g: &OverlayGraph, labels: &[NodeId]) -> Self {
        Self::build(g, labels, |_| 0)
    }

    fn build(g: &OverlayGraph, labels: &[NodeId], loops: impl Fn(NodeId) -> u32) -> Self {
        assert_eq!(labels.len(), g.node_count());
        let mut offsets = Vec::with_capacity(g.node_count() + 1);
        let mut slots = Vec::with_capacity(g.volume() as usize);
        offsets.push(0);
        for u in g.nodes() {
            for (v, m) in g.neighbors(u) {
                slots.extend(std::iter::repeat_n(v.index() as u32, m as usize));
            }
            offsets.push(slots.len());
        }
        WalkView { labels: labels.to_vec(), offsets, slots, loops: g.nodes().map(loops).collect() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn global(&self, local: NodeId) -> NodeId {
        self.labels[local.index()]
    }

    pub fn walk_degree(&self, local: NodeId) -> u64 {
        let i = local.index();
        (self.offsets[i + 1] - self.offsets[i]) as u64 + self.loops[i] as u64
    }

    /// One transition, uniform over the node's slots.
    pub fn step<R: Rng + ?Sized>(&self, at: NodeId, rng: &mut R) -> Option<NodeId> {
        let i = at.index();
        let real = self.offsets[i + 1] - self.offsets[i];
        let total = real as u64 + self.loops[i] as u64;
        if total == 0 {
            return None;
        }
        let r = rng.gen_range(0..total) as usize;
        if r < real {
            Some(NodeId::from_index(self.slots[self.offsets[i] + r] as usize))
        } else {
            Some(at)
        }
    }
}

#[derive(Clone, Debug)]
pub struct WalkOutcome {
    pub tokens: Vec<WalkToken>,
    pub rounds: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStats {
    pub initiated: u64,
    pub replied: u64,
    pub bits: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub rounds_elapsed: u64,
    pub messages_initiated: u64,
    pub messages_replied: u64,
    pub total_bits: u64,
    pub max_initiations_per_round: u64,
    pub per_label: BTreeMap<String, LabelStats>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: u64,
    pub label: String,
    pub initiations: u64,
    pub replies: u64,
    pub bits: u64,
    pub links_added: u64,
    pub links_dropped: u64,
}

/// The network being simulated: links, knowledge, counters and clock.
#[derive(Clone, Debug)]
pub struct Network {
    config: EngineConfig,
    links: OverlayGraph,
    knowledge: Option<Vec<HashSet<NodeId>>>,
    stats: TrafficStats,
    label: String,
    round_load: Vec<u32>,
    trace: Vec<TraceRecord>,
    noop_drops: u64,
}

impl Network {
    /// Starts with the links and neighbor knowledge of `g`.
    pub fn new(config: EngineConfig, g: &OverlayGraph) -> Self {
        let knowledge = (config.mode == Mode::Faithful)
            .then(|| g.nodes().map(|u| g.neighbor_ids(u).collect()).collect());
        Network {
            config,
            links: g.simplified(),
            knowledge,
            stats: TrafficStats::default(),
            label: String::from("init"),
            round_load: Vec::new(),
            trace: Vec::new(),
            noop_drops: 0,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn faithful(&self) -> bool {
        self.config.mode == Mode::Faithful
    }

    pub fn node_count(&self) -> usize {
        self.links.node_count()
    }

    pub fn links(&self) -> &OverlayGraph {
        &self.links
    }

    pub fn noop_drops(&self) -> u64 {
        self.noop_drops
    }

    pub fn rounds(&self) -> u64 {
        self.stats.rounds_elapsed
    }

    pub fn stats(&self) -> TrafficStats {
        let mut s = self.stats.clone();
        s.max_initiations_per_round = self.round_load.iter().copied().max().unwrap_or(0) as u64;
        s
    }

    pub fn set_label(&mut self, label: &str) {
        self.label.clear();
        self.label.push_str(label);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// The trace as JSON lines.
    pub fn trace_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn knows(&self, u: NodeId, v: NodeId) -> bool {
        match &self.knowledge {
            None => true,
            Some(k) => u == v || k[u.index()].contains(&v),
        }
    }

    pub fn learn(&mut self, u: NodeId, v: NodeId) {
        if let Some(k) = &mut self.knowledge {
            if u != v {
                k[u.index()].insert(v);
            }
        }
    }

    fn check_node(&self, v: NodeId) -> Result<(), EngineError> {
        if self.links.contains(v) {
            Ok(())
        } else {
            Err(EngineError::NoSuchNode(v))
        }
    }

    fn check_size(&self, bits: u64) -> Result<(), EngineError> {
        if bits > self.config.b_max_bits {
            Err(EngineError::Oversize { bits, limit: self.config.b_max_bits })
        } else {
            Ok(())
        }
    }

    fn tick(&mut self, initiations: u64, replies: u64, bits: u64, added: u64, dropped: u64) -> Result<(), EngineError> {
        if self.stats.rounds_elapsed >= self.config.max_rounds {
            return Err(EngineError::RoundLimit(self.config.max_rounds));
        }
        let round = self.stats.rounds_elapsed;
        if self.faithful() {
            self.stats.messages_initiated += initiations;
            self.stats.messages_replied += replies;
            self.stats.total_bits += bits;
            let entry = self.stats.per_label.entry(self.label.clone()).or_default();
            entry.initiated += initiations;
            entry.replied += replies;
            entry.bits += bits;
            if initiations > 0 {
                let r = round as usize;
                if self.round_load.len() <= r {
                    self.round_load.resize(r + 1, 0);
                }
                self.round_load[r] += initiations as u32;
            }
        }
        if self.config.trace {
            self.trace.push(TraceRecord {
                round,
                label: self.label.clone(),
                initiations,
                replies,
                bits,
                links_added: added,
                links_dropped: dropped,
            });
        }
        self.stats.rounds_elapsed += 1;
        Ok(())
    }

    /// Lets `rounds` rounds pass with no traffic.
    pub fn idle(&mut self, rounds: u64) {
        self.stats.rounds_elapsed += rounds;
    }

    /// One round. `contacts` holds at most one message per initiating node;
    /// `reply` sees every delivered message and may answer it.
    pub fn run_round<F>(&mut self, contacts: &BTreeMap<NodeId, Outgoing>, mut reply: F) -> Result<RoundOutcome, EngineError>
    where
        F: FnMut(&RoundMessage) -> Option<Outgoing>,
    {
        let mut out = RoundOutcome::default();
        let mut bits = 0;
        for (&src, msg) in contacts {
            self.check_node(src)?;
            self.check_node(msg.dst)?;
            if !self.knows(src, msg.dst) {
                return Err(EngineError::UnknownContact { src, dst: msg.dst });
            }
            let bit_size = 8 * msg.payload.len() as u64;
            self.check_size(bit_size)?;
            bits += bit_size;
            out.delivered.push(RoundMessage {
                src,
                dst: msg.dst,
                kind: MessageKind::Initiate,
                payload: msg.payload.clone(),
                bit_size,
            });
        }
        for m in &out.delivered {
            if let Some(r) = reply(m) {
                let bit_size = 8 * r.payload.len() as u64;
                self.check_size(bit_size)?;
                bits += bit_size;
                out.replies.push(RoundMessage {
                    src: m.dst,
                    dst: m.src,
                    kind: MessageKind::Reply,
                    payload: r.payload,
                    bit_size,
                });
                for id in r.reveals {
                    self.learn(m.src, id);
                }
            }
        }
        // State changes happen after every delivery.
        for (&src, msg) in contacts {
            self.learn(msg.dst, src);
            for &id in &msg.reveals {
                self.learn(msg.dst, id);
            }
        }
        self.tick(out.delivered.len() as u64, out.replies.len() as u64, bits, 0, 0)?;
        Ok(out)
    }

    /// Adds then drops links; takes no round of its own.
    pub fn reconfigure(&mut self, add: &[(NodeId, NodeId)], drop: &[(NodeId, NodeId)]) -> Result<(), EngineError> {
        for &(u, v) in add {
            self.check_node(u)?;
            self.check_node(v)?;
            if !self.knows(u, v) && !self.knows(v, u) {
                return Err(EngineError::UnknownContact { src: u, dst: v });
            }
        }
        for &(u, v) in add {
            self.learn(u, v);
            self.learn(v, u);
            if u != v && !self.links.has_edge(u, v) {
                self.links.add_edge(u, v);
            }
        }
        let mut dropped = 0;
        for &(u, v) in drop {
            if self.links.remove_edge(u, v) {
                dropped += 1;
            } else {
                self.noop_drops += 1;
            }
        }
        if self.config.trace {
            self.trace.push(TraceRecord {
                round: self.stats.rounds_elapsed,
                label: self.label.clone(),
                initiations: 0,
                replies: 0,
                bits: 0,
                links_added: add.len() as u64,
                links_dropped: dropped,
            });
        }
        Ok(())
    }

    /// Moves every token until it has taken all its steps.
    pub fn run_walks<R: Rng + ?Sized>(
        &mut self,
        mut tokens: Vec<WalkToken>,
        view: &WalkView,
        payload_bits: u64,
        rng: &mut R,
    ) -> Result<WalkOutcome, EngineError> {
        for t in &tokens {
            if t.origin.index() >= view.len() || t.at.index() >= view.len() {
                return Err(EngineError::NoSuchNode(t.at));
            }
        }
        let hop_bits = payload_bits + WALK_HEADER_BITS;
        if tokens.iter().any(|t| t.steps_taken < t.steps_total) {
            self.check_size(hop_bits)?;
        }
        let rounds = if self.faithful() {
            self.walks_scheduled(&mut tokens, view, hop_bits, rng)?
        } else {
            self.walks_lockstep(&mut tokens, view, rng)?
        };
        Ok(WalkOutcome { tokens, rounds })
    }

    fn walks_lockstep<R: Rng + ?Sized>(&mut self, tokens: &mut [WalkToken], view: &WalkView, rng: &mut R) -> Result<u64, EngineError> {
        let mut longest = 0;
        for t in tokens.iter_mut() {
            longest = longest.max((t.steps_total - t.steps_taken) as u64);
            while t.steps_taken < t.steps_total {
                t.at = view
                    .step(t.at, rng)
                    .ok_or(EngineError::StuckToken { origin: view.global(t.origin), at: view.global(t.at) })?;
                t.steps_taken += 1;
            }
        }
        if self.stats.rounds_elapsed + longest > self.config.max_rounds {
            return Err(EngineError::RoundLimit(self.config.max_rounds));
        }
        self.stats.rounds_elapsed += longest;
        Ok(longest)
    }

    fn walks_scheduled<R: Rng + ?Sized>(
        &mut self,
        tokens: &mut [WalkToken],
        view: &WalkView,
        hop_bits: u64,
        rng: &mut R,
    ) -> Result<u64, EngineError> {
        type Entry = Reverse<(u32, NodeId, u64, usize)>;
        let key = |t: &WalkToken, i: usize| Reverse((t.steps_taken, t.origin, mix64(t.payload), i));
        let mut queues: Vec<BinaryHeap<Entry>> = vec![BinaryHeap::new(); view.len()];
        let mut pending = 0usize;
        for (i, t) in tokens.iter().enumerate() {
            if t.steps_taken < t.steps_total {
                queues[t.at.index()].push(key(t, i));
                pending += 1;
            }
        }
        let mut rounds = 0;
        let mut arrivals = Vec::new();
        while pending > 0 {
            let mut moved = 0;
            for queue in queues.iter_mut() {
                let Some(Reverse((_, _, _, i))) = queue.pop() else {
                    continue;
                };
                let t = &mut tokens[i];
                let next = view
                    .step(t.at, rng)
                    .ok_or(EngineError::StuckToken { origin: view.global(t.origin), at: view.global(t.at) })?;
                if next != t.at {
                    moved += 1;
                }
                t.at = next;
                t.steps_taken += 1;
                if t.steps_taken == t.steps_total {
                    pending -= 1;
                } else {
                    arrivals.push((next, i));
                }
            }
            for (next, i) in arrivals.drain(..) {
                queues[next.index()].push(key(&tokens[i], i));
            }
            self.tick(moved, 0, moved * hop_bits, 0, 0)?;
            rounds += 1;
        }
        for t in tokens.iter() {
            let (holder, origin) = (view.global(t.at), view.global(t.origin));
            self.learn(holder, origin);
        }
        Ok(rounds)
    }

    /// Runs `f` once per item as if all items executed side by side: the
    /// clock advances by the longest item, traffic adds up.
    pub fn parallel<T, X, E, F>(&mut self, items: Vec<X>, mut f: F) -> Result<Vec<T>, E>
    where
        F: FnMut(&mut Self, X) -> Result<T, E>,
    {
        let start = self.stats.rounds_elapsed;
        let mut end = start;
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            self.stats.rounds_elapsed = start;
            out.push(f(self, item)?);
            end = end.max(self.stats.rounds_elapsed);
        }
        self.stats.rounds_elapsed = end;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn ids(pairs: &[(u32, u32)]) -> Vec<(NodeId, NodeId)> {
        pairs.iter().map(|&(a, b)| (NodeId(a), NodeId(b))).collect()
    }

    fn faithful(g: &OverlayGraph) -> Network {
        Network::new(EngineConfig::new(1, Mode::Faithful, g.node_count() as u64), g)
    }

    #[test]
    fn star_center_answers_every_leaf() {
        let star = OverlayGraph::from_edges(6, ids(&[(1, 2), (1, 3), (1, 4), (1, 5), (1, 6)]));
        let mut net = faithful(&star);
        let contacts = (2..=6).map(|i| (NodeId(i), Outgoing::new(NodeId(1), vec![i as u8]))).collect();
        let out = net.run_round(&contacts, |m| Some(Outgoing::new(m.src, vec![0]))).unwrap();
        assert_eq!(out.delivered.len(), 5);
        assert_eq!(out.replies.len(), 5);
        assert!(out.delivered.iter().all(|m| m.dst == NodeId(1)));
        let s = net.stats();
        assert_eq!((s.messages_initiated, s.messages_replied, s.rounds_elapsed), (5, 5, 1));
        assert_eq!(s.total_bits, 80);
        assert_eq!(s.max_initiations_per_round, 5);
    }

    #[test]
    fn silent_round_only_advances_clock() {
        let g = OverlayGraph::from_edges(2, ids(&[(1, 2)]));
        let mut net = faithful(&g);
        net.run_round(&BTreeMap::new(), |_| None).unwrap();
        let s = net.stats();
        assert_eq!(s.rounds_elapsed, 1);
        assert_eq!((s.messages_initiated, s.messages_replied, s.total_bits), (0, 0, 0));
    }

    #[test]
    fn mutual_contact() {
        let g = OverlayGraph::from_edges(2, ids(&[(1, 2)]));
        let mut net = faithful(&g);
        let contacts =
            [(NodeId(1), Outgoing::new(NodeId(2), vec![1])), (NodeId(2), Outgoing::new(NodeId(1), vec![2]))].into();
        let out = net.run_round(&contacts, |m| Some(Outgoing::new(m.src, m.payload.clone()))).unwrap();
        assert_eq!(out.delivered.len(), 2);
        assert_eq!(out.replies.len(), 2);
        assert_eq!(net.stats().messages_initiated, 2);
    }

    #[test]
    fn unknown_and_oversize_contacts_fail() {
        let g = OverlayGraph::from_edges(3, ids(&[(1, 2), (2, 3)]));
        let mut net = faithful(&g);
        let far = [(NodeId(1), Outgoing::new(NodeId(3), vec![]))].into();
        assert_eq!(
            net.run_round(&far, |_| None).unwrap_err(),
            EngineError::UnknownContact { src: NodeId(1), dst: NodeId(3) }
        );
        let limit = net.config().b_max_bits;
        let big = [(NodeId(1), Outgoing::new(NodeId(2), vec![0; limit as usize / 8 + 1]))].into();
        assert!(matches!(net.run_round(&big, |_| None), Err(EngineError::Oversize { .. })));
    }

    #[test]
    fn learned_ids_allow_links() {
        let g = OverlayGraph::from_edges(3, ids(&[(1, 2), (2, 3)]));
        let mut net = faithful(&g);
        assert!(net.reconfigure(&ids(&[(1, 3)]), &[]).is_err());
        let msg = [(NodeId(2), Outgoing { dst: NodeId(1), payload: vec![3], reveals: vec![NodeId(3)] })].into();
        net.run_round(&msg, |_| None).unwrap();
        net.reconfigure(&ids(&[(1, 3)]), &[]).unwrap();
        assert!(net.links().has_edge(NodeId(3), NodeId(1)));
        assert!(net.knows(NodeId(3), NodeId(1)));
    }

    #[test]
    fn drops_are_counted_noops_when_missing() {
        let g = OverlayGraph::from_edges(3, ids(&[(1, 2), (2, 3)]));
        let mut net = faithful(&g);
        net.reconfigure(&[], &ids(&[(1, 3)])).unwrap();
        assert_eq!(net.noop_drops(), 1);
        net.reconfigure(&ids(&[(1, 2)]), &ids(&[(1, 2)])).unwrap();
        assert!(!net.links().has_edge(NodeId(1), NodeId(2)));
        let before = net.links().clone();
        net.learn(NodeId(1), NodeId(3));
        net.reconfigure(&ids(&[(1, 3)]), &ids(&[(1, 3)])).unwrap();
        assert_eq!(net.links(), &before);
    }

    #[test]
    fn zero_step_tokens_stay_home() {
        let g = OverlayGraph::from_edges(2, ids(&[(1, 2)]));
        let view = WalkView::new(&g, &[NodeId(1), NodeId(2)]);
        let mut net = faithful(&g);
        let t = WalkToken::new(NodeId(2), 0, 0, WalkKind::Expansion);
        let out = net.run_walks(vec![t], &view, 0, &mut stream(1, &[])).unwrap();
        assert_eq!(out.rounds, 0);
        assert_eq!(out.tokens[0].at, NodeId(2));
    }

    #[test]
    fn stuck_token_is_an_error() {
        let g = OverlayGraph::new(2);
        let view = WalkView::new(&g, &[NodeId(1), NodeId(2)]);
        let mut net = faithful(&g);
        let t = WalkToken::new(NodeId(1), 3, 0, WalkKind::Expansion);
        assert!(matches!(net.run_walks(vec![t], &view, 0, &mut stream(1, &[])), Err(EngineError::StuckToken { .. })));
    }

    #[test]
    fn parallel_sections_overlap_in_time() {
        let g = OverlayGraph::from_edges(4, ids(&[(1, 2), (3, 4)]));
        let mut net = faithful(&g);
        net.parallel(vec![3u64, 5], |net, k| {
            for _ in 0..k {
                net.run_round(&BTreeMap::new(), |_| None)?;
            }
            Ok::<_, EngineError>(())
        })
        .unwrap();
        assert_eq!(net.rounds(), 5);
    }

    #[test]
    fn faithful_rounds_respect_one_token_per_node() {
        let g = OverlayGraph::from_edges(3, ids(&[(1, 2), (2, 3), (3, 1)]));
        let labels: Vec<_> = g.nodes().collect();
        let view = WalkView::plain(&g, &labels);
        let mut net = faithful(&g);
        let tokens = (0..6).map(|i| WalkToken::new(NodeId(1), 4, i, WalkKind::Expansion)).collect();
        let out = net.run_walks(tokens, &view, 8, &mut stream(3, &[])).unwrap();
        assert!(out.rounds >= 6);
        let s = net.stats();
        assert_eq!(s.messages_initiated, 24);
        assert!(s.max_initiations_per_round <= 3);
        assert_eq!(s.total_bits, 24 * (8 + WALK_HEADER_BITS));
        assert!(out.tokens.iter().all(|t| t.steps_taken == 4));
    }
}
