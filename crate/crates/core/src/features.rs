//! Shortest-path distance features between query endpoints.
//!
//! Distances are hop counts over the directed union graph (an edge `i → j`
//! exists when any relation links `i` to `j`). A query triplet is excluded
//! from its own distance computation: only that one directed triplet is
//! ignored, so a parallel edge of another relation still counts.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::graph::{KnowledgeGraph, Triplet};

pub const DEFAULT_CAP: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Distance {
    Hops(u32),
    Unreachable,
}

impl Distance {
    /// Numeric value fed to the scoring head: hops, or `cap + 1` when unreachable.
    pub fn value(self, cap: u32) -> u32 {
        match self {
            Distance::Hops(h) => h,
            Distance::Unreachable => cap + 1,
        }
    }

    /// Value scaled to `[0, 1]` by `cap + 1`.
    pub fn encode(self, cap: u32) -> f64 {
        self.value(cap) as f64 / (cap + 1) as f64
    }

    fn from_raw(raw: u32) -> Self {
        if raw == UNSEEN {
            Distance::Unreachable
        } else {
            Distance::Hops(raw)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceFeature {
    /// d(head, tail)
    pub forward: Distance,
    /// d(tail, head)
    pub backward: Distance,
    pub cap: u32,
}

impl DistanceFeature {
    pub fn encoded(&self) -> [f64; 2] {
        [self.forward.encode(self.cap), self.backward.encode(self.cap)]
    }
}

const UNSEEN: u32 = u32::MAX;

/// Deduplicated union adjacency plus the number of relations backing each
/// directed node pair.
#[derive(Debug, Clone)]
pub struct UnionAdjacency {
    out: Vec<Vec<usize>>,
    inc: Vec<Vec<usize>>,
    multiplicity: HashMap<(usize, usize), u32>,
}

impl UnionAdjacency {
    pub fn new(g: &KnowledgeGraph) -> Self {
        let n = g.num_nodes();
        let mut multiplicity: HashMap<(usize, usize), u32> = HashMap::new();
        for t in g.triplets() {
            *multiplicity.entry((t.head, t.tail)).or_insert(0) += 1;
        }
        let mut out = vec![Vec::new(); n];
        let mut inc = vec![Vec::new(); n];
        let mut pairs: Vec<_> = multiplicity.keys().copied().collect();
        pairs.sort_unstable();
        for (i, j) in pairs {
            out[i].push(j);
            inc[j].push(i);
        }
        Self {
            out,
            inc,
            multiplicity,
        }
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out[i]
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.inc[i]
    }

    /// The directed pair removed by excluding `t`, if excluding it deletes the
    /// union edge.
    fn removed_edge(&self, g: &KnowledgeGraph, t: &Triplet) -> Option<(usize, usize)> {
        if g.contains(t) && self.multiplicity.get(&(t.head, t.tail)) == Some(&1) {
            Some((t.head, t.tail))
        } else {
            None
        }
    }

    /// BFS hop counts from `src` up to `cap`, following out-edges (or in-edges
    /// when `reverse`). Stops early once `stop_at` is settled.
    fn bfs(
        &self,
        src: usize,
        cap: u32,
        reverse: bool,
        skip: Option<(usize, usize)>,
        stop_at: Option<usize>,
    ) -> Vec<u32> {
        let n = self.out.len();
        let mut dist = vec![UNSEEN; n];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            if Some(u) == stop_at {
                break;
            }
            let du = dist[u];
            if du >= cap {
                continue;
            }
            let nbrs = if reverse { &self.inc[u] } else { &self.out[u] };
            for &v in nbrs {
                let edge = if reverse { (v, u) } else { (u, v) };
                if Some(edge) == skip || dist[v] != UNSEEN {
                    continue;
                }
                dist[v] = du + 1;
                queue.push_back(v);
            }
        }
        dist
    }
}

/// Hop count from `src` to `dst`, ignoring the triplet `exclude` when given.
pub fn shortest_distance(
    g: &KnowledgeGraph,
    src: usize,
    dst: usize,
    exclude: Option<&Triplet>,
    cap: u32,
) -> Distance {
    assert!(src < g.num_nodes() && dst < g.num_nodes(), "node index out of range");
    assert!(cap >= 1, "cap must be positive");
    if src == dst {
        return Distance::Hops(0);
    }
    let adj = UnionAdjacency::new(g);
    let skip = exclude.and_then(|t| adj.removed_edge(g, t));
    Distance::from_raw(adj.bfs(src, cap, false, skip, Some(dst))[dst])
}

/// Per-graph distance cache: one forward BFS per head node and one reverse BFS
/// per tail node, reused across queries. Exclusion only changes the forward
/// distance of a triplet that is present in the graph, since no shortest path
/// from `j` to `i` can use the edge `i → j`.
pub struct DistanceCache<'g> {
    graph: &'g KnowledgeGraph,
    adj: UnionAdjacency,
    cap: u32,
    forward: HashMap<usize, Vec<u32>>,
    reverse: HashMap<usize, Vec<u32>>,
}

impl<'g> DistanceCache<'g> {
    pub fn new(graph: &'g KnowledgeGraph, cap: u32) -> Self {
        assert!(cap >= 1, "cap must be positive");
        Self {
            graph,
            adj: UnionAdjacency::new(graph),
            cap,
            forward: HashMap::new(),
            reverse: HashMap::new(),
        }
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    fn forward_dist(&mut self, src: usize, dst: usize) -> Distance {
        if let Some(d) = self.forward.get(&src) {
            return Distance::from_raw(d[dst]);
        }
        if let Some(d) = self.reverse.get(&dst) {
            return Distance::from_raw(d[src]);
        }
        let d = self.adj.bfs(src, self.cap, false, None, None);
        let out = Distance::from_raw(d[dst]);
        self.forward.insert(src, d);
        out
    }

    /// Distance to `dst` from `src`, served from the reverse tree of `dst`.
    fn reverse_dist(&mut self, dst: usize, src: usize) -> Distance {
        if let Some(d) = self.reverse.get(&dst) {
            return Distance::from_raw(d[src]);
        }
        if let Some(d) = self.forward.get(&src) {
            return Distance::from_raw(d[dst]);
        }
        let d = self.adj.bfs(dst, self.cap, true, None, None);
        let out = Distance::from_raw(d[src]);
        self.reverse.insert(dst, d);
        out
    }

    pub fn feature(&mut self, q: &Triplet) -> DistanceFeature {
        let (i, j) = (q.head, q.tail);
        let (forward, backward) = if i == j {
            (Distance::Hops(0), Distance::Hops(0))
        } else {
            let forward = match self.adj.removed_edge(self.graph, q) {
                Some(skip) => {
                    Distance::from_raw(self.adj.bfs(i, self.cap, false, Some(skip), Some(j))[j])
                }
                None => self.forward_dist(i, j),
            };
            (forward, self.reverse_dist(i, j))
        };
        DistanceFeature {
            forward,
            backward,
            cap: self.cap,
        }
    }

    pub fn features(&mut self, queries: &[Triplet]) -> Vec<DistanceFeature> {
        queries.iter().map(|q| self.feature(q)).collect()
    }
}

/// Batched distance features with exclusion of each query triplet.
pub fn distance_features(g: &KnowledgeGraph, queries: &[Triplet], cap: u32) -> Vec<DistanceFeature> {
    DistanceCache::new(g, cap).features(queries)
}
