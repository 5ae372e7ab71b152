//! Synthetic grandparent benchmark built from binary trees.
//!
//! Nodes of a depth-`D` tree are heap-indexed `0 .. 2^(D+1)-1`. Each child
//! `v` links to its parent `u₁` (observed) and to its grandparent `u₂`
//! (query), both with relation `2m` for odd `v` and `2m + 1` for even `v`,
//! where `m` is the tree index.

use crate::graph::Triplet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fd2 {
    pub observed: Vec<Triplet>,
    pub queries: Vec<Triplet>,
    pub num_nodes: usize,
    pub num_relations: usize,
}

pub fn tree_size(depth: u32) -> usize {
    (1usize << (depth + 1)) - 1
}

/// Generates one tree per entry of `depths`. With `relation_offset_per_tree`
/// every tree gets its own pair of relations; otherwise all trees share
/// relations 0 and 1.
pub fn generate_fd2(depths: &[u32], relation_offset_per_tree: bool) -> Fd2 {
    let mut observed = Vec::new();
    let mut queries = Vec::new();
    let mut base = 0;
    for (m, &depth) in depths.iter().enumerate() {
        let rel_base = if relation_offset_per_tree { 2 * m } else { 0 };
        for d in 1..=depth {
            for v in (1usize << d) - 1..=(1usize << (d + 1)) - 2 {
                let rel = rel_base + if v % 2 == 0 { 1 } else { 0 };
                let u1 = (v - 1) / 2;
                observed.push(Triplet::new(base + v, rel, base + u1));
                if d >= 2 {
                    let u2 = (u1 - 1) / 2;
                    queries.push(Triplet::new(base + v, rel, base + u2));
                }
            }
        }
        base += tree_size(depth);
    }
    let num_relations = if relation_offset_per_tree {
        2 * depths.len()
    } else {
        2
    };
    Fd2 {
        observed,
        queries,
        num_nodes: base,
        num_relations: num_relations.max(2),
    }
}
