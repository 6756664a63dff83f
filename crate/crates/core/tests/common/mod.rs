#![allow(dead_code)]

use std::collections::BTreeSet;

use gossip_overlay::sketch::{Cell, SketchMatrix, SketchVector};
use gossip_overlay::{NodeId, OverlayGraph};
use rand::Rng;

/// Adjacency rows as bitmasks; enough for the exhaustive small corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Small {
    pub n: usize,
    pub adj: [u8; 8],
}

impl Small {
    pub fn to_graph(self) -> OverlayGraph {
        let mut g = OverlayGraph::new(self.n);
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.adj[i] >> j & 1 == 1 {
                    g.add_edge(NodeId::from_index(i), NodeId::from_index(j));
                }
            }
        }
        g
    }
}

fn refine(s: &Small, mut cells: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    loop {
        let mut next = Vec::with_capacity(cells.len());
        for cell in &cells {
            if cell.len() == 1 {
                next.push(cell.clone());
                continue;
            }
            let sig = |v: usize| -> Vec<u32> {
                cells.iter().map(|c| c.iter().filter(|&&w| s.adj[v] >> w & 1 == 1).count() as u32).collect()
            };
            let mut keyed: Vec<(Vec<u32>, usize)> = cell.iter().map(|&v| (sig(v), v)).collect();
            keyed.sort();
            let mut group = vec![keyed[0].1];
            for w in keyed.windows(2) {
                if w[0].0 != w[1].0 {
                    next.push(std::mem::take(&mut group));
                }
                group.push(w[1].1);
            }
            next.push(group);
        }
        if next.len() == cells.len() {
            return next;
        }
        cells = next;
    }
}

fn encode(s: &Small, order: &[usize]) -> u64 {
    let mut code = 0u64;
    let mut bit = 0;
    for i in 0..s.n {
        for j in i + 1..s.n {
            if s.adj[order[i]] >> order[j] & 1 == 1 {
                code |= 1 << bit;
            }
            bit += 1;
        }
    }
    code
}

fn search(s: &Small, cells: Vec<Vec<usize>>, best: &mut u64) {
    let cells = refine(s, cells);
    match cells.iter().position(|c| c.len() > 1) {
        None => {
            let order: Vec<usize> = cells.iter().map(|c| c[0]).collect();
            *best = (*best).min(encode(s, &order));
        }
        Some(at) => {
            for &v in &cells[at] {
                let mut split = cells.clone();
                let rest: Vec<usize> = cells[at].iter().copied().filter(|&w| w != v).collect();
                split[at] = vec![v];
                split.insert(at + 1, rest);
                search(s, split, best);
            }
        }
    }
}

/// Isomorphism-invariant code: the smallest upper-triangle bit string over
/// the labelings that individualization and refinement can reach.
pub fn canonical_code(s: &Small) -> u64 {
    let mut best = u64::MAX;
    search(s, vec![(0..s.n).collect()], &mut best);
    best
}

fn decode(n: usize, code: u64) -> Small {
    let mut adj = [0u8; 8];
    let mut bit = 0;
    for i in 0..n {
        for j in i + 1..n {
            if code >> bit & 1 == 1 {
                adj[i] |= 1 << j;
                adj[j] |= 1 << i;
            }
            bit += 1;
        }
    }
    Small { n, adj }
}

/// All connected graphs on `n <= 8` nodes up to isomorphism, by attaching a
/// new node to every nonempty neighbourhood of the graphs one size down.
/// Every connected graph has a node whose removal keeps it connected, so
/// nothing is missed.
pub fn connected_graphs(max_n: usize) -> Vec<Vec<Small>> {
    assert!(max_n <= 8);
    let mut levels = vec![vec![Small { n: 1, adj: [0; 8] }]];
    for n in 2..=max_n {
        let mut codes = BTreeSet::new();
        for g in levels.last().unwrap() {
            for mask in 1u16..1 << (n - 1) {
                let mut h = *g;
                h.n = n;
                for i in 0..n - 1 {
                    if mask >> i & 1 == 1 {
                        h.adj[i] |= 1 << (n - 1);
                        h.adj[n - 1] |= 1 << i;
                    }
                }
                codes.insert(canonical_code(&h));
            }
        }
        levels.push(codes.into_iter().map(|c| decode(n, c)).collect());
    }
    levels
}

/// Connected graph on `n` nodes: a random attachment tree plus extra edges.
pub fn random_connected<R: Rng>(n: usize, extra: f64, rng: &mut R) -> OverlayGraph {
    let mut g = OverlayGraph::new(n);
    for i in 1..n {
        let j = rng.gen_range(0..i);
        g.add_edge(NodeId::from_index(i), NodeId::from_index(j));
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (NodeId::from_index(i), NodeId::from_index(j));
            if !g.has_edge(a, b) && rng.gen_bool(extra) {
                g.add_edge(a, b);
            }
        }
    }
    g
}

pub fn random_subset<R: Rng>(n: usize, rng: &mut R) -> Vec<NodeId> {
    loop {
        let s: Vec<NodeId> = (0..n).filter(|_| rng.gen_bool(0.5)).map(NodeId::from_index).collect();
        if !s.is_empty() {
            return s;
        }
    }
}

/// Edges with exactly one endpoint in `s`, as (smaller, larger).
pub fn cut_edges(g: &OverlayGraph, s: &[NodeId]) -> Vec<(NodeId, NodeId)> {
    let inside: BTreeSet<NodeId> = s.iter().copied().collect();
    g.edges()
        .filter(|(u, v, _)| inside.contains(u) != inside.contains(v))
        .map(|(u, v, _)| (u, v))
        .collect()
}

pub struct UnionFind(Vec<usize>);

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut x = x;
        while self.0[x] != r {
            let next = self.0[x];
            self.0[x] = r;
            x = next;
        }
        r
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
    }
}

const P: u128 = (1 << 61) - 1;

/// Dense reference sketch: walks every ID pair in order, builds the signed
/// incidence vector of `s` directly, and fills the cells with plain modular
/// arithmetic. Only the per-repetition keys come from the library.
pub struct DenseOracle {
    pub id_bound: u64,
    pub levels: usize,
    pub reps: usize,
}

impl DenseOracle {
    pub fn incidence(&self, g: &OverlayGraph, s: &[NodeId]) -> Vec<(u64, i64)> {
        let inside: BTreeSet<NodeId> = s.iter().copied().collect();
        let mut out = Vec::new();
        let mut flat = 0u64;
        for a in 1..=self.id_bound as u32 {
            for b in a + 1..=self.id_bound as u32 {
                let (lo, hi) = (NodeId(a), NodeId(b));
                let mut value = 0i64;
                if g.contains(hi) && g.has_edge(lo, hi) {
                    // lo sees a larger neighbour (+1), hi a smaller one (-1).
                    if inside.contains(&lo) {
                        value += 1;
                    }
                    if inside.contains(&hi) {
                        value -= 1;
                    }
                }
                if value != 0 {
                    out.push((flat, value));
                }
                flat += 1;
            }
        }
        out
    }

    fn hash(coeffs: [u64; 4], x: u64) -> u128 {
        let x = x as u128 % P;
        let mut acc = 0u128;
        let mut power = 1u128;
        for c in coeffs {
            acc = (acc + c as u128 * power) % P;
            power = power * x % P;
        }
        acc
    }

    fn level(&self, h: u128) -> usize {
        // Deepest l with h < 2^(61 - l).
        let mut l = 0;
        while l < 61 && h < 1u128 << (61 - (l + 1)) {
            l += 1;
        }
        l.min(self.levels - 1)
    }

    pub fn sketch(&self, m: &SketchMatrix, coords: &[(u64, i64)]) -> SketchVector {
        let mut cells = vec![Cell::default(); self.reps * self.levels];
        for rep in 0..self.reps {
            let key = m.key(rep);
            for &(flat, value) in coords {
                let top = self.level(Self::hash(key.coeffs, flat));
                let mut zp = 1u128;
                for _ in 0..flat {
                    zp = zp * key.z as u128 % P;
                }
                let signed = if value >= 0 { value as u128 % P } else { P - (value.unsigned_abs() as u128 % P) };
                let fp = signed * zp % P;
                for cell in &mut cells[rep * self.levels..rep * self.levels + top + 1] {
                    cell.count += value;
                    cell.index_sum += value as i128 * flat as i128;
                    cell.fingerprint = ((cell.fingerprint as u128 + fp) % P) as u64;
                }
            }
        }
        SketchVector { tag: m.tag(), reps: self.reps as u32, levels: self.levels as u32, cells }
    }
}
