//! Linear ℓ0 sketches of signed incidence vectors.
//!
//! A node's incidence vector has one coordinate per unordered ID pair: `+1`
//! at `{u, v}` when the neighbor `u` has the larger ID, `-1` when it has the
//! smaller one. Summing the vectors of a node set cancels every internal edge
//! and leaves exactly the cut, so a linear sketch of the sum lets the set
//! sample one of its outgoing edges.
//!
//! Each repetition hashes coordinates with a degree-3 polynomial over
//! GF(2^61 - 1) into nested levels (level `h` keeps roughly a `2^-h`
//! fraction). Every level is a 1-sparse tester: count, index-weighted sum and
//! a polynomial fingerprint.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::NodeId;

/// The Mersenne prime 2^61 - 1, used for hashing and fingerprints.
pub const FIELD: u64 = (1 << 61) - 1;

/// Default per-sample failure probability.
pub const DEFAULT_FAILURE: f64 = 0.25;

const CELL_BYTES: usize = 32;
const HEADER_BYTES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SketchError {
    #[error("sketches were built from different seeds")]
    SeedMismatch,
    #[error("sketch shapes differ")]
    ShapeMismatch,
    #[error("serialized sketch is malformed: {0}")]
    Malformed(&'static str),
}

pub fn mul_mod(a: u64, b: u64) -> u64 {
    let p = a as u128 * b as u128;
    let r = (p as u64 & FIELD) + (p >> 61) as u64;
    if r >= FIELD {
        r - FIELD
    } else {
        r
    }
}

pub fn add_mod(a: u64, b: u64) -> u64 {
    let r = a + b;
    if r >= FIELD {
        r - FIELD
    } else {
        r
    }
}

pub fn pow_mod(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base);
        }
        base = mul_mod(base, base);
        exp >>= 1;
    }
    acc
}

/// Reduces a signed integer into `[0, FIELD)`.
pub fn to_field(v: i128) -> u64 {
    v.rem_euclid(FIELD as i128) as u64
}

/// Coordinate of an unordered ID pair in the flattened pair space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeIndex {
    pub lo: NodeId,
    pub hi: NodeId,
    pub flat: u64,
}

impl EdgeIndex {
    pub fn coordinate_count(id_bound: u64) -> u64 {
        id_bound * (id_bound - 1) / 2
    }

    fn row_start(a: u64, id_bound: u64) -> u64 {
        a * (2 * id_bound - a - 1) / 2
    }

    pub fn new(u: NodeId, v: NodeId, id_bound: u64) -> Self {
        assert!(u != v, "no coordinate for a self-loop");
        let (lo, hi) = if u < v { (u, v) } else { (v, u) };
        assert!(hi.0 as u64 <= id_bound, "id {hi} above bound {id_bound}");
        let a = lo.0 as u64 - 1;
        let b = hi.0 as u64 - 1;
        EdgeIndex { lo, hi, flat: Self::row_start(a, id_bound) + (b - a - 1) }
    }

    pub fn from_flat(flat: u64, id_bound: u64) -> Self {
        assert!(flat < Self::coordinate_count(id_bound));
        let (mut lo, mut hi) = (0u64, id_bound - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if Self::row_start(mid, id_bound) <= flat {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let a = lo;
        let b = flat - Self::row_start(a, id_bound) + a + 1;
        EdgeIndex { lo: NodeId(a as u32 + 1), hi: NodeId(b as u32 + 1), flat }
    }
}

/// The shared random string a cluster agrees on before sketching.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SketchSeed {
    pub words: Vec<u64>,
}

impl SketchSeed {
    /// Draws `max(64, ceil(log2 N)^2)` random bits.
    pub fn random<R: Rng + ?Sized>(id_bound: u64, rng: &mut R) -> Self {
        let log = ceil_log2(id_bound).max(1) as usize;
        let words = (log * log).max(64).div_ceil(64);
        SketchSeed { words: (0..words).map(|_| rng.gen()).collect() }
    }

    pub fn bit_len(&self) -> usize {
        64 * self.words.len()
    }

    /// A fresh seed for retry number `attempt`, computable by every holder.
    pub fn retry(&self, attempt: u32) -> Self {
        if attempt == 0 {
            return self.clone();
        }
        let mut rng = ChaCha20Rng::from_seed(self.digest(b"retry", attempt));
        SketchSeed { words: (0..self.words.len()).map(|_| rng.next_u64()).collect() }
    }

    fn digest(&self, domain: &[u8], extra: u32) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(domain);
        h.update(extra.to_le_bytes());
        for w in &self.words {
            h.update(w.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Short identifier used to reject merges across seeds.
    pub fn tag(&self) -> u64 {
        let d = self.digest(b"tag", 0);
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// Shape of a sketch: ID bound, levels per repetition, repetitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchParams {
    pub id_bound: u64,
    pub levels: usize,
    pub reps: usize,
}

impl SketchParams {
    pub fn new(id_bound: u64) -> Self {
        Self::with_failure(id_bound, DEFAULT_FAILURE)
    }

    /// `ceil(2 log2 N^2)` levels and `ceil(log2 1/delta) + 2` repetitions.
    pub fn with_failure(id_bound: u64, delta: f64) -> Self {
        assert!(id_bound >= 2, "need at least two IDs");
        assert!(delta > 0.0 && delta < 1.0);
        let levels = (4.0 * (id_bound as f64).log2()).ceil().max(1.0) as usize;
        let reps = (1.0 / delta).log2().ceil() as usize + 2;
        SketchParams { id_bound, levels, reps }
    }

    pub fn cells(&self) -> usize {
        self.levels * self.reps
    }

    pub fn serialized_bits(&self) -> u64 {
        8 * (HEADER_BYTES + CELL_BYTES * self.cells()) as u64
    }
}

/// One 1-sparse recovery cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub count: i64,
    pub index_sum: i128,
    pub fingerprint: u64,
}

impl Cell {
    pub fn is_zero(&self) -> bool {
        self.count == 0 && self.index_sum == 0 && self.fingerprint == 0
    }

    fn add(&mut self, other: &Cell) {
        self.count += other.count;
        self.index_sum += other.index_sum;
        self.fingerprint = add_mod(self.fingerprint, other.fingerprint);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchVector {
    pub tag: u64,
    pub reps: u32,
    pub levels: u32,
    /// Repetition-major, level-minor.
    pub cells: Vec<Cell>,
}

impl SketchVector {
    pub fn cell(&self, rep: usize, level: usize) -> &Cell {
        &self.cells[rep * self.levels as usize + level]
    }

    pub fn is_zero(&self) -> bool {
        self.cells.iter().all(Cell::is_zero)
    }

    fn check_compatible(&self, other: &SketchVector) -> Result<(), SketchError> {
        if self.tag != other.tag {
            return Err(SketchError::SeedMismatch);
        }
        if self.reps != other.reps || self.levels != other.levels {
            return Err(SketchError::ShapeMismatch);
        }
        Ok(())
    }

    pub fn merge(&self, other: &SketchVector) -> Result<SketchVector, SketchError> {
        let mut out = self.clone();
        out.merge_in(other)?;
        Ok(out)
    }

    pub fn merge_in(&mut self, other: &SketchVector) -> Result<(), SketchError> {
        self.check_compatible(other)?;
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.add(b);
        }
        Ok(())
    }

    /// Canonical little-endian layout: header, then 32 bytes per cell.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + CELL_BYTES * self.cells.len());
        out.extend_from_slice(&self.tag.to_le_bytes());
        out.extend_from_slice(&self.reps.to_le_bytes());
        out.extend_from_slice(&self.levels.to_le_bytes());
        for c in &self.cells {
            out.extend_from_slice(&c.count.to_le_bytes());
            out.extend_from_slice(&c.index_sum.to_le_bytes());
            out.extend_from_slice(&c.fingerprint.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SketchError> {
        if bytes.len() < HEADER_BYTES {
            return Err(SketchError::Malformed("short header"));
        }
        let tag = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let reps = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let levels = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let n = reps as usize * levels as usize;
        if bytes.len() != HEADER_BYTES + CELL_BYTES * n {
            return Err(SketchError::Malformed("length does not match shape"));
        }
        let cells = bytes[HEADER_BYTES..]
            .chunks_exact(CELL_BYTES)
            .map(|c| Cell {
                count: i64::from_le_bytes(c[0..8].try_into().unwrap()),
                index_sum: i128::from_le_bytes(c[8..24].try_into().unwrap()),
                fingerprint: u64::from_le_bytes(c[24..32].try_into().unwrap()),
            })
            .collect();
        Ok(SketchVector { tag, reps, levels, cells })
    }

    pub fn bit_len(&self) -> u64 {
        8 * (HEADER_BYTES + CELL_BYTES * self.cells.len()) as u64
    }
}

/// Outcome of sampling from an aggregated sketch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SampledEdge {
    Edge(NodeId, NodeId),
    EmptyCut,
    Failure,
}

/// Per-repetition hash coefficients and fingerprint point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RepetitionKey {
    pub coeffs: [u64; 4],
    pub z: u64,
}

impl RepetitionKey {
    pub fn hash(&self, x: u64) -> u64 {
        let [a0, a1, a2, a3] = self.coeffs;
        let x = x % FIELD;
        add_mod(mul_mod(add_mod(mul_mod(add_mod(mul_mod(a3, x), a2), x), a1), x), a0)
    }
}

/// The sketching matrix every holder of one seed reconstructs identically.
#[derive(Clone, Debug)]
pub struct SketchMatrix {
    params: SketchParams,
    tag: u64,
    keys: Vec<RepetitionKey>,
}

impl SketchMatrix {
    pub fn new(params: SketchParams, seed: &SketchSeed) -> Self {
        let mut rng = ChaCha20Rng::from_seed(seed.digest(b"matrix", 0));
        let keys = (0..params.reps)
            .map(|_| RepetitionKey {
                coeffs: [0; 4].map(|_| rng.gen_range(0..FIELD)),
                z: rng.gen_range(1..FIELD),
            })
            .collect();
        SketchMatrix { params, tag: seed.tag(), keys }
    }

    pub fn params(&self) -> &SketchParams {
        &self.params
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn key(&self, rep: usize) -> &RepetitionKey {
        &self.keys[rep]
    }

    /// Deepest level that keeps coordinate `flat` in repetition `rep`.
    pub fn level(&self, rep: usize, flat: u64) -> usize {
        let h = self.keys[rep].hash(flat);
        let bits = 64 - h.leading_zeros() as usize;
        (61 - bits).min(self.params.levels - 1)
    }

    pub fn zero(&self) -> SketchVector {
        SketchVector {
            tag: self.tag,
            reps: self.params.reps as u32,
            levels: self.params.levels as u32,
            cells: vec![Cell::default(); self.params.cells()],
        }
    }

    fn add_coordinate(&self, s: &mut SketchVector, flat: u64, value: i64) {
        let levels = self.params.levels;
        for (rep, key) in self.keys.iter().enumerate() {
            let top = self.level(rep, flat);
            let fp = mul_mod(to_field(value as i128), pow_mod(key.z, flat));
            let delta = Cell { count: value, index_sum: value as i128 * flat as i128, fingerprint: fp };
            for cell in &mut s.cells[rep * levels..rep * levels + top + 1] {
                cell.add(&delta);
            }
        }
    }

    /// Sketch of one node's signed incidence vector. Self-loops are ignored.
    pub fn sketch_node<I: IntoIterator<Item = NodeId>>(&self, node: NodeId, neighbors: I) -> SketchVector {
        let mut s = self.zero();
        for u in neighbors {
            if u == node {
                continue;
            }
            let idx = EdgeIndex::new(node, u, self.params.id_bound);
            self.add_coordinate(&mut s, idx.flat, if u > node { 1 } else { -1 });
        }
        s
    }

    /// Sketch of an arbitrary sparse vector given as `(flat, value)` pairs.
    pub fn apply(&self, coords: &[(u64, i64)]) -> SketchVector {
        let mut s = self.zero();
        for &(flat, value) in coords {
            if value != 0 {
                self.add_coordinate(&mut s, flat, value);
            }
        }
        s
    }

    /// Samples a nonzero coordinate of the sketched vector.
    ///
    /// Repetitions are scanned in order; within one, the deepest nonzero
    /// level must pass the 1-sparse test or the repetition is abandoned.
    pub fn sample_cut_edge(&self, s: &SketchVector) -> Result<SampledEdge, SketchError> {
        if s.tag != self.tag {
            return Err(SketchError::SeedMismatch);
        }
        if s.reps as usize != self.params.reps || s.levels as usize != self.params.levels {
            return Err(SketchError::ShapeMismatch);
        }
        if (0..self.params.reps).all(|r| s.cell(r, 0).is_zero()) {
            return Ok(SampledEdge::EmptyCut);
        }
        for rep in 0..self.params.reps {
            let Some(level) = (0..self.params.levels).rev().find(|&h| !s.cell(rep, h).is_zero()) else {
                continue;
            };
            if let Some(idx) = self.one_sparse(rep, level, s.cell(rep, level)) {
                return Ok(SampledEdge::Edge(idx.lo, idx.hi));
            }
        }
        Ok(SampledEdge::Failure)
    }

    fn one_sparse(&self, rep: usize, level: usize, cell: &Cell) -> Option<EdgeIndex> {
        if cell.count != 1 && cell.count != -1 {
            return None;
        }
        let flat = cell.index_sum * cell.count as i128;
        let total = EdgeIndex::coordinate_count(self.params.id_bound);
        if flat < 0 || flat >= total as i128 {
            return None;
        }
        let flat = flat as u64;
        let expected = mul_mod(to_field(cell.count as i128), pow_mod(self.keys[rep].z, flat));
        if expected != cell.fingerprint {
            return None;
        }
        // Deeper cells are zero, so the coordinate must stop exactly here.
        if self.level(rep, flat) != level {
            return None;
        }
        Some(EdgeIndex::from_flat(flat, self.params.id_bound))
    }
}

/// Convenience wrapper that builds the matrix for a single node.
pub fn build_sketch<I: IntoIterator<Item = NodeId>>(
    node: NodeId,
    neighbors: I,
    params: SketchParams,
    seed: &SketchSeed,
) -> SketchVector {
    SketchMatrix::new(params, seed).sketch_node(node, neighbors)
}
