//! Query/observed splits that keep every query node observed.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::Triplet;

/// Picks `count` triplets from `candidates` (in order) such that every node
/// of a picked triplet keeps at least one unpicked incident triplet.
/// Returns `(picked, rest)`, both in candidate order.
pub fn coverage_select(
    candidates: &[Triplet],
    count: usize,
    num_nodes: usize,
) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
    let mut incident = vec![0usize; num_nodes];
    for t in candidates {
        incident[t.head] += 1;
        if t.tail != t.head {
            incident[t.tail] += 1;
        }
    }
    let mut picked = Vec::with_capacity(count);
    let mut rest = Vec::with_capacity(candidates.len().saturating_sub(count));
    let mut blocking = Vec::new();
    for t in candidates {
        if picked.len() < count && incident[t.head] > 1 && incident[t.tail] > 1 {
            incident[t.head] -= 1;
            if t.tail != t.head {
                incident[t.tail] -= 1;
            }
            picked.push(*t);
        } else {
            if picked.len() < count {
                blocking.extend([t.head, t.tail].into_iter().filter(|&x| incident[x] <= 1));
            }
            rest.push(*t);
        }
    }
    if picked.len() < count {
        blocking.sort_unstable();
        blocking.dedup();
        return Err(Error::Coverage {
            needed: count,
            found: picked.len(),
            blocking,
        });
    }
    Ok((picked, rest))
}

/// Shuffles `triplets` with `seed`, then applies [`coverage_select`].
pub fn random_coverage_select(
    triplets: &[Triplet],
    count: usize,
    num_nodes: usize,
    seed: u64,
) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
    let mut shuffled = triplets.to_vec();
    shuffled.sort_unstable();
    shuffled.dedup();
    shuffled.shuffle(&mut crate::rng::rng(seed));
    coverage_select(&shuffled, count, num_nodes)
}
