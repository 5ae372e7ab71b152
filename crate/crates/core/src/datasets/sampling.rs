//! Subgraph samplers and relation-topic partitioning.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Triplet};

fn incident_lists(g: &KnowledgeGraph) -> Vec<Vec<Triplet>> {
    let mut inc = vec![Vec::new(); g.num_nodes()];
    for t in g.triplets() {
        inc[t.head].push(*t);
        if t.tail != t.head {
            inc[t.tail].push(*t);
        }
    }
    inc
}

/// Degree-bounded BFS sampler.
///
/// Starts from the highest-degree node (lowest index on ties). Each expanded
/// node contributes at most `max_per_node` of its incident triplets, drawn
/// uniformly when it has more. A triplet is only taken while the node budget
/// `max_nodes` and triplet budget `max_triplets` both hold, so every returned
/// triplet touches a node reached earlier and the result is connected.
pub fn sample_subgraph(
    g: &KnowledgeGraph,
    max_nodes: usize,
    max_triplets: usize,
    max_per_node: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if g.is_empty() {
        return Err(Error::Invalid("cannot sample from an empty graph".into()));
    }
    if max_nodes == 0 || max_triplets == 0 || max_per_node == 0 {
        return Err(Error::Invalid("sampling limits must be at least 1".into()));
    }
    let deg = g.degrees();
    let start = (0..g.num_nodes())
        .max_by_key(|&i| (deg[i], std::cmp::Reverse(i)))
        .unwrap();
    let incident = incident_lists(g);
    let mut rng = crate::rng::rng(seed);
    let mut nodes = HashSet::from([start]);
    let mut visited = HashSet::from([start]);
    let mut taken: BTreeSet<Triplet> = BTreeSet::new();
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        if nodes.len() >= max_nodes || taken.len() >= max_triplets {
            break;
        }
        let all = &incident[u];
        let chosen: Vec<Triplet> = if all.len() > max_per_node {
            let mut idx = sample(&mut rng, all.len(), max_per_node).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        } else {
            all.clone()
        };
        for t in chosen {
            if taken.len() >= max_triplets {
                break;
            }
            let other = if t.head == u { t.tail } else { t.head };
            if !nodes.contains(&other) {
                if nodes.len() >= max_nodes {
                    continue;
                }
                nodes.insert(other);
            }
            taken.insert(t);
            if visited.insert(other) {
                queue.push_back(other);
            }
        }
    }
    Ok(taken.into_iter().collect())
}

/// Forest-fire node sample of exactly `target_nodes` nodes, with the
/// triplets of the induced subgraph.
///
/// Each burning node ignites a geometric number (mean `p / (1 - p)`) of its
/// unburnt neighbors, ignoring direction. When the fire dies out before the
/// target is reached, it restarts from a random unburnt node.
pub fn forest_fire_sample(
    g: &KnowledgeGraph,
    target_nodes: usize,
    burn_prob: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<Triplet>)> {
    let n = g.num_nodes();
    if target_nodes == 0 || target_nodes > n {
        return Err(Error::Invalid(format!(
            "target_nodes must be in 1..={n}, got {target_nodes}"
        )));
    }
    if !(0.0..1.0).contains(&burn_prob) {
        return Err(Error::Invalid("burn_prob must be in [0, 1)".into()));
    }
    let mut nbrs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for t in g.triplets() {
        if t.head != t.tail {
            nbrs[t.head].insert(t.tail);
            nbrs[t.tail].insert(t.head);
        }
    }
    let mut rng = crate::rng::rng(seed);
    let mut burnt = vec![false; n];
    let mut order = Vec::with_capacity(target_nodes);
    let mut queue = VecDeque::new();
    while order.len() < target_nodes {
        if queue.is_empty() {
            let unburnt: Vec<usize> = (0..n).filter(|&i| !burnt[i]).collect();
            let s = *unburnt.choose(&mut rng).expect("target below node count");
            burnt[s] = true;
            order.push(s);
            queue.push_back(s);
            continue;
        }
        let u = queue.pop_front().unwrap();
        let mut count = 0;
        while rng.gen::<f64>() < burn_prob {
            count += 1;
        }
        let mut fresh: Vec<usize> = nbrs[u].iter().copied().filter(|&v| !burnt[v]).collect();
        fresh.shuffle(&mut rng);
        for v in fresh.into_iter().take(count) {
            if order.len() >= target_nodes {
                break;
            }
            burnt[v] = true;
            order.push(v);
            queue.push_back(v);
        }
    }
    order.sort_unstable();
    let triplets = g
        .triplets()
        .iter()
        .filter(|t| burnt[t.head] && burnt[t.tail])
        .copied()
        .collect();
    Ok((order, triplets))
}

/// One relation-topic subgraph with dense reindexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicGraph {
    pub name: String,
    /// Triplets in the new index space.
    pub triplets: Vec<Triplet>,
    /// Original node index of each new node index.
    pub nodes: Vec<usize>,
    /// Original relation index of each new relation index.
    pub relations: Vec<usize>,
}

impl TopicGraph {
    pub fn graph(&self) -> KnowledgeGraph {
        KnowledgeGraph::new(
            self.triplets.iter().copied(),
            self.nodes.len(),
            self.relations.len().max(1),
        )
        .expect("reindexed triplets are in range")
    }
}

/// Partitions triplets by relation group. New indices follow the order of
/// the group's relation list and the first appearance of each node.
pub fn topic_split(triplets: &[Triplet], groups: &[(String, Vec<usize>)]) -> Result<Vec<TopicGraph>> {
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (gi, (name, rels)) in groups.iter().enumerate() {
        for &r in rels {
            if let Some(prev) = owner.insert(r, gi) {
                if prev != gi {
                    return Err(Error::Invalid(format!(
                        "relation {r} is in groups {:?} and {name:?}",
                        groups[prev].0
                    )));
                }
            }
        }
    }
    if let Some(t) = triplets.iter().find(|t| !owner.contains_key(&t.relation)) {
        return Err(Error::Invalid(format!("relation {} is in no group", t.relation)));
    }
    let mut out: Vec<TopicGraph> = groups
        .iter()
        .map(|(name, rels)| {
            let mut seen = HashSet::new();
            let relations: Vec<usize> = rels.iter().copied().filter(|r| seen.insert(*r)).collect();
            TopicGraph {
                name: name.clone(),
                triplets: Vec::new(),
                nodes: Vec::new(),
                relations,
            }
        })
        .collect();
    let mut node_maps: Vec<HashMap<usize, usize>> = vec![HashMap::new(); groups.len()];
    let rel_maps: Vec<HashMap<usize, usize>> = out
        .iter()
        .map(|tg| tg.relations.iter().enumerate().map(|(i, &r)| (r, i)).collect())
        .collect();
    for t in triplets {
        let gi = owner[&t.relation];
        let tg = &mut out[gi];
        let map = &mut node_maps[gi];
        let mut id = |x: usize| {
            *map.entry(x).or_insert_with(|| {
                tg.nodes.push(x);
                tg.nodes.len() - 1
            })
        };
        let h = id(t.head);
        let tl = id(t.tail);
        tg.triplets.push(Triplet::new(h, rel_maps[gi][&t.relation], tl));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(leaves: usize) -> KnowledgeGraph {
        KnowledgeGraph::new((1..=leaves).map(|l| Triplet::new(0, 0, l)), leaves + 1, 1).unwrap()
    }

    fn random_graph(n: usize, r: usize, m: usize, seed: u64) -> KnowledgeGraph {
        let mut rng = crate::rng::rng(seed);
        let ts: Vec<Triplet> = (0..m)
            .map(|_| Triplet::new(rng.gen_range(0..n), rng.gen_range(0..r), rng.gen_range(0..n)))
            .collect();
        KnowledgeGraph::new(ts, n, r).unwrap()
    }

    #[test]
    fn one_per_expansion_on_star() {
        for seed in 0..20 {
            let out = sample_subgraph(&star(5), 100, 100, 1, seed).unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].head, 0);
        }
    }

    #[test]
    fn inactive_budgets_return_component() {
        let g = KnowledgeGraph::new(
            [Triplet::new(0, 0, 1), Triplet::new(1, 0, 2), Triplet::new(2, 0, 1), Triplet::new(3, 0, 4)],
            5,
            1,
        )
        .unwrap();
        let out = sample_subgraph(&g, 100, 100, 100, 0).unwrap();
        assert_eq!(out, g.triplets()[..3].to_vec());
    }

    #[test]
    fn empty_graph_is_an_error() {
        assert!(sample_subgraph(&KnowledgeGraph::empty(3, 1).unwrap(), 5, 5, 5, 0).is_err());
    }

    #[test]
    fn forest_fire_edges() {
        let g = random_graph(100, 3, 300, 1);
        let a = forest_fire_sample(&g, 30, 0.8, 4).unwrap();
        assert_eq!(a, forest_fire_sample(&g, 30, 0.8, 4).unwrap());
        assert_eq!(a.0.len(), 30);
        let all = forest_fire_sample(&g, 100, 0.8, 4).unwrap();
        assert_eq!(all.0, (0..100).collect::<Vec<_>>());
        assert_eq!(all.1, g.triplets().to_vec());
        let one = forest_fire_sample(&g, 1, 0.8, 4).unwrap();
        assert_eq!(one.0.len(), 1);
        assert!(one.1.iter().all(|t| t.head == t.tail));
        assert!(forest_fire_sample(&g, 0, 0.8, 4).is_err());
    }

    #[test]
    fn topic_split_reindexes() {
        let ts = [Triplet::new(5, 0, 6), Triplet::new(6, 1, 7), Triplet::new(7, 2, 5)];
        let groups = vec![("ab".to_string(), vec![0, 1]), ("c".to_string(), vec![2])];
        let out = topic_split(&ts, &groups).unwrap();
        assert_eq!(out[0].relations.len(), 2);
        assert_eq!(out[1].relations.len(), 1);
        assert_eq!(out[0].triplets, vec![Triplet::new(0, 0, 1), Triplet::new(1, 1, 2)]);
        assert_eq!(out[1].triplets, vec![Triplet::new(0, 0, 1)]);
        assert_eq!(out[1].nodes, vec![7, 5]);
        assert_eq!(out.iter().map(|t| t.triplets.len()).sum::<usize>(), 3);

        let whole = topic_split(&ts, &[("all".to_string(), vec![0, 1, 2])]).unwrap();
        assert_eq!(whole[0].triplets.len(), 3);

        let overlap = vec![("a".to_string(), vec![0, 1]), ("b".to_string(), vec![1, 2])];
        assert!(topic_split(&ts, &overlap).is_err());
        assert!(topic_split(&ts, &[("a".to_string(), vec![0])]).is_err());
    }
}
