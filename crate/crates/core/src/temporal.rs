//! Relation graphs and temporal sub-structure consistency.
//!
//! A relation matrix is thresholded into an undirected graph over the
//! samples of a batch. Comparing the graphs of two consecutive visits to the
//! same batch, the connected components of their edge intersection are the
//! stable sub-structures; the temporal loss ties the current relation
//! sub-blocks on those components to the previous visit's snapshot.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::relation::{check_aligned, RelationMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    size: usize,
    bits: Vec<bool>,
    pub batch_ids: Vec<u64>,
    pub tau: f64,
    /// Training iteration the source relation matrix came from.
    pub iteration: u64,
}

impl AdjacencyMatrix {
    /// Builds a graph from raw bits (row-major, `B × B`), symmetrizing by OR.
    pub fn from_bits(bits: Vec<bool>, batch_ids: Vec<u64>, tau: f64) -> Result<Self> {
        let b = batch_ids.len();
        if bits.len() != b * b {
            return Err(Error::Shape {
                op: "adjacency",
                left: vec![bits.len()],
                right: vec![b, b],
            });
        }
        let mut sym = bits.clone();
        for i in 0..b {
            for j in 0..b {
                sym[i * b + j] = bits[i * b + j] || bits[j * b + i];
            }
        }
        Ok(AdjacencyMatrix {
            size: b,
            bits: sym,
            batch_ids,
            tau,
            iteration: 0,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Edge test; self-loops never count.
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.bits[i * self.size + j]
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.size).flat_map(move |i| ((i + 1)..self.size).filter(move |&j| self.has_edge(i, j)).map(move |j| (i, j)))
    }

    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }

    pub fn tau_in_unit_interval(&self) -> bool {
        (0.0..=1.0).contains(&self.tau)
    }
}

/// `A(i,j) = 1` iff `R(i,j) ≥ τ`, then OR-symmetrized.
pub fn binarize(r: &RelationMatrix, tau: f64) -> AdjacencyMatrix {
    
    let bits = r.values.data().iter().map(|&v| v >= tau).collect();
    AdjacencyMatrix::from_bits(bits, r.batch_ids.clone(), tau).expect("relation matrix is B x B")
}

/// Disjoint-set forest with union by size and path halving.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            core::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StableSubstructureSet {
    /// Sorted vertex lists, ordered by smallest vertex. Each has ≥ 2 members.
    pub components: Vec<Vec<usize>>,
    /// `(previous, current)` iteration indices.
    pub source_iterations: (u64, u64),
}

impl StableSubstructureSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Connected components (size ≥ 2) of the graph whose edges are present in
/// both `a_t` and `a_prev`.
pub fn stable_substructures(a_t: &AdjacencyMatrix, a_prev: &AdjacencyMatrix) -> Result<StableSubstructureSet> {
    check_aligned(&a_t.batch_ids, &a_prev.batch_ids)?;
    let b = a_t.size();
    let mut uf = UnionFind::new(b);
    for (i, j) in a_t.edges() {
        if a_prev.has_edge(i, j) {
            uf.union(i, j);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..b {
        let root = uf.find(v);
        groups.entry(root).or_default().push(v);
    }
    let mut components: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= 2).collect();
    components.sort();
    Ok(StableSubstructureSet {
        components,
        source_iterations: (a_prev.iteration, a_t.iteration),
    })
}

fn check_components(s: &StableSubstructureSet, b: usize) -> Result<()> {
    for c in &s.components {
        if let Some(&v) = c.iter().find(|&&v| v >= b) {
            return Err(Error::IndexOutOfRange { index: v, len: b });
        }
    }
    Ok(())
}

/// `Σ_i (1/B)·‖R_t[s_i, s_i] − R_{t−1}[s_i, s_i]‖²_F`; zero without components.
pub fn temporal_consistency_loss(
    r_t: &RelationMatrix,
    r_prev: &RelationMatrix,
    s: &StableSubstructureSet,
) -> Result<f64> {
    check_aligned(&r_t.batch_ids, &r_prev.batch_ids)?;
    let b = r_t.size();
    check_components(s, b)?;
    let mut total = 0.0;
    for c in &s.components {
        let cur = r_t.values.submatrix(c)?;
        let prev = r_prev.values.submatrix(c)?;
        total += cur.sub(&prev)?.squared_frobenius() / b as f64;
    }
    Ok(total)
}

/// Tape form of [`temporal_consistency_loss`]; `r_prev` enters as a constant.
pub fn temporal_consistency_tape(
    tape: &mut Tape,
    r_t: Var,
    r_prev: &RelationMatrix,
    s: &StableSubstructureSet,
) -> Result<Var> {
    let b = tape.value(r_t).rows();
    if r_prev.size() != b || tape.value(r_t).shape() != r_prev.values.shape() {
        return Err(Error::Alignment(format!(
            "current batch has {b} samples, snapshot has {}",
            r_prev.size()
        )));
    }
    check_components(s, b)?;
    let mut total: Option<Var> = None;
    for c in &s.components {
        let cur = tape.submatrix(r_t, c)?;
        let prev = tape.constant(r_prev.values.submatrix(c)?);
        let d = tape.sub(cur, prev)?;
        let sq = tape.square(d)?;
        let term = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => tape.scale(t, 1.0 / b as f64),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// Identity of a fixed mini-batch: its sample ids in batch order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BatchKey(pub Vec<u64>);

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    /// Detached snapshot of the student relation matrix.
    pub relation: RelationMatrix,
    pub adjacency: AdjacencyMatrix,
    pub iteration: u64,
}

/// Last-visit relation snapshots, one per batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationCache {
    entries: BTreeMap<BatchKey, CacheEntry>,
}

impl RelationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &BatchKey) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    /// Replaces the entry for `key`, discarding the older snapshot.
    pub fn update(&mut self, key: BatchKey, relation: RelationMatrix, adjacency: AdjacencyMatrix, iteration: u64) {
        self.entries.insert(
            key,
            CacheEntry {
                relation,
                adjacency,
                iteration,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
