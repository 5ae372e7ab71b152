//! Knowledge-graph data model and the node/relation permutation actions.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triplet {
    pub const fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    /// Stable 64-bit key of the triplet content, used to key random streams.
    pub fn content_key(&self) -> u64 {
        crate::rng::derive_seed(
            self.head as u64,
            &[self.relation as u64, self.tail as u64],
        )
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

impl From<(usize, usize, usize)> for Triplet {
    fn from((h, r, t): (usize, usize, usize)) -> Self {
        Self::new(h, r, t)
    }
}

/// Immutable directed multi-relational graph.
///
/// Triplets are stored sorted and deduplicated. `by_relation[k]` holds the
/// `(head, tail)` pairs of relation `k`.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    num_nodes: usize,
    num_relations: usize,
    triplets: Vec<Triplet>,
    by_relation: Vec<Vec<(usize, usize)>>,
    index: HashSet<Triplet>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.num_nodes == other.num_nodes
            && self.num_relations == other.num_relations
            && self.triplets == other.triplets
    }
}

impl Eq for KnowledgeGraph {}

impl KnowledgeGraph {
    pub fn new(
        triplets: impl IntoIterator<Item = Triplet>,
        num_nodes: usize,
        num_relations: usize,
    ) -> Result<Self> {
        if num_relations == 0 {
            return Err(Error::Invalid("num_relations must be at least 1".into()));
        }
        let mut triplets: Vec<Triplet> = triplets.into_iter().collect();
        if let Some(bad) = triplets.iter().find(|t| {
            t.head >= num_nodes || t.tail >= num_nodes || t.relation >= num_relations
        }) {
            return Err(Error::TripletOutOfRange {
                triplet: *bad,
                num_nodes,
                num_relations,
            });
        }
        triplets.sort_unstable();
        triplets.dedup();
        let mut by_relation = vec![Vec::new(); num_relations];
        for t in &triplets {
            by_relation[t.relation].push((t.head, t.tail));
        }
        let index = triplets.iter().copied().collect();
        Ok(Self {
            num_nodes,
            num_relations,
            triplets,
            by_relation,
            index,
        })
    }

    pub fn empty(num_nodes: usize, num_relations: usize) -> Result<Self> {
        Self::new(std::iter::empty(), num_nodes, num_relations)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn num_triplets(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    /// `(head, tail)` pairs of relation `k`.
    pub fn relation_edges(&self, k: usize) -> &[(usize, usize)] {
        &self.by_relation[k]
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.index.contains(t)
    }

    pub fn check_triplet(&self, t: &Triplet) -> Result<()> {
        if t.head >= self.num_nodes || t.tail >= self.num_nodes || t.relation >= self.num_relations
        {
            return Err(Error::TripletOutOfRange {
                triplet: *t,
                num_nodes: self.num_nodes,
                num_relations: self.num_relations,
            });
        }
        Ok(())
    }

    /// Number of incident triplets (in + out) per node; a self-loop counts once.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for t in &self.triplets {
            deg[t.head] += 1;
            if t.tail != t.head {
                deg[t.tail] += 1;
            }
        }
        deg
    }

    /// Returns a copy without the given triplets.
    pub fn without(&self, removed: &[Triplet]) -> Self {
        let removed: HashSet<&Triplet> = removed.iter().collect();
        let kept = self
            .triplets
            .iter()
            .filter(|t| !removed.contains(t))
            .copied();
        Self::new(kept, self.num_nodes, self.num_relations).expect("subset of a valid graph")
    }

    /// Adds the inverse `(j, k + R, i)` of every triplet; relation count doubles.
    pub fn augment_inverses(&self) -> Self {
        let r = self.num_relations;
        let inverses = self
            .triplets
            .iter()
            .map(|t| Triplet::new(t.tail, t.relation + r, t.head));
        let all = self.triplets.iter().copied().chain(inverses).collect::<Vec<_>>();
        Self::new(all, self.num_nodes, 2 * r).expect("inverse indices are in range")
    }

    /// Applies `(φ, τ)`: every `(i, k, j)` becomes `(φ(i), τ(k), φ(j))`.
    pub fn permute(&self, p: &PermutationPair) -> Result<Self> {
        if p.node_perm.len() != self.num_nodes {
            return Err(Error::PermutationSize {
                expected: self.num_nodes,
                actual: p.node_perm.len(),
            });
        }
        if p.rel_perm.len() != self.num_relations {
            return Err(Error::PermutationSize {
                expected: self.num_relations,
                actual: p.rel_perm.len(),
            });
        }
        let mapped = self.triplets.iter().map(|t| p.apply_triplet(t));
        Self::new(mapped, self.num_nodes, self.num_relations)
    }
}

/// A node permutation φ together with a relation permutation τ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationPair {
    node_perm: Vec<usize>,
    rel_perm: Vec<usize>,
}

fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &x in p {
        if x >= p.len() || seen[x] {
            return false;
        }
        seen[x] = true;
    }
    true
}

fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &x) in p.iter().enumerate() {
        inv[x] = i;
    }
    inv
}

impl PermutationPair {
    pub fn new(node_perm: Vec<usize>, rel_perm: Vec<usize>) -> Result<Self> {
        if !is_bijection(&node_perm) {
            return Err(Error::Invalid("node permutation is not a bijection".into()));
        }
        if !is_bijection(&rel_perm) {
            return Err(Error::Invalid("relation permutation is not a bijection".into()));
        }
        Ok(Self {
            node_perm,
            rel_perm,
        })
    }

    pub fn identity(num_nodes: usize, num_relations: usize) -> Self {
        Self {
            node_perm: (0..num_nodes).collect(),
            rel_perm: (0..num_relations).collect(),
        }
    }

    /// Uniformly random pair, deterministic for a fixed seed.
    pub fn random(num_nodes: usize, num_relations: usize, seed: u64) -> Self {
        let mut rng = crate::rng::rng(seed);
        let mut node_perm: Vec<usize> = (0..num_nodes).collect();
        let mut rel_perm: Vec<usize> = (0..num_relations).collect();
        node_perm.shuffle(&mut rng);
        rel_perm.shuffle(&mut rng);
        Self {
            node_perm,
            rel_perm,
        }
    }

    pub fn node_perm(&self) -> &[usize] {
        &self.node_perm
    }

    pub fn rel_perm(&self) -> &[usize] {
        &self.rel_perm
    }

    pub fn node(&self, i: usize) -> usize {
        self.node_perm[i]
    }

    pub fn relation(&self, k: usize) -> usize {
        self.rel_perm[k]
    }

    pub fn apply_triplet(&self, t: &Triplet) -> Triplet {
        Triplet::new(
            self.node_perm[t.head],
            self.rel_perm[t.relation],
            self.node_perm[t.tail],
        )
    }

    pub fn inverse(&self) -> Self {
        Self {
            node_perm: invert(&self.node_perm),
            rel_perm: invert(&self.rel_perm),
        }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &Self) -> Self {
        Self {
            node_perm: first.node_perm.iter().map(|&i| self.node_perm[i]).collect(),
            rel_perm: first.rel_perm.iter().map(|&k| self.rel_perm[k]).collect(),
        }
    }

    /// Extension to an inverse-augmented relation set: `τ'(k + R) = τ(k) + R`.
    pub fn extend_to_inverses(&self) -> Self {
        let r = self.rel_perm.len();
        let rel_perm = self
            .rel_perm
            .iter()
            .copied()
            .chain(self.rel_perm.iter().map(|&k| k + r))
            .collect();
        Self {
            node_perm: self.node_perm.clone(),
            rel_perm,
        }
    }

    /// Node-only part `(φ, id)`.
    pub fn node_part(&self) -> Self {
        Self {
            node_perm: self.node_perm.clone(),
            rel_perm: (0..self.rel_perm.len()).collect(),
        }
    }

    /// Relation-only part `(id, τ)`.
    pub fn relation_part(&self) -> Self {
        Self {
            node_perm: (0..self.node_perm.len()).collect(),
            rel_perm: self.rel_perm.clone(),
        }
    }
}
