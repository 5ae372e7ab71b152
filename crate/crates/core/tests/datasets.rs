mod common;

use std::collections::BTreeSet;

use deqkg::datasets::{
    fd2_clauses, forest_fire_sample, generate_fd2, sample_subgraph, uqer_derive, uqer_derive_with_budget,
    DatasetBundle,
};
use deqkg::deq::random_graph;
use deqkg::{Error, KnowledgeGraph, Triplet};

#[test]
fn tree_counts_follow_closed_forms() {
    for depth in 1..=8 {
        common::fd2_counts_match(depth).unwrap();
    }
}

#[test]
fn clause_set_reproduces_generator_queries() {
    for depth in 2..=4 {
        common::uqer_matches_generator(depth).unwrap();
    }
}

#[test]
fn strict_clause_only_finds_mixed_parity_paths() {
    let (g, queries) = common::fd2_graph(&[4]);
    let strict = uqer_derive(&fd2_clauses()[0], &g).unwrap();
    let mixed: BTreeSet<Triplet> = queries
        .into_iter()
        .filter(|t| {
            let parent = (t.head - 1) / 2;
            (t.head % 2) != (parent % 2)
        })
        .collect();
    assert_eq!(strict, mixed);
}

#[test]
fn derivation_commutes_with_relabelling() {
    common::uqer_commutes_with_permutations(50, 3).unwrap();
}

#[test]
fn derivation_budget_is_enforced() {
    let (g, _) = common::fd2_graph(&[5]);
    match uqer_derive_with_budget(&fd2_clauses()[0], &g, 10) {
        Err(Error::Budget { budget }) => assert_eq!(budget, 10),
        other => panic!("expected a budget error, got {other:?}"),
    }
}

#[test]
fn sampler_keeps_budgets_and_connectivity() {
    common::sampler_respects_budgets(100).unwrap();
}

#[test]
fn sampler_is_seeded() {
    let g = random_graph(40, 3, 0.1, 8);
    assert_eq!(sample_subgraph(&g, 15, 30, 3, 1).unwrap(), sample_subgraph(&g, 15, 30, 3, 1).unwrap());
}

#[test]
fn split_never_orphans_query_nodes() {
    let done = common::split_keeps_query_nodes(100).unwrap();
    assert!(done >= 50, "only {done} runs could be split");
}

#[test]
fn forest_fire_hits_the_target_and_induces() {
    let g = random_graph(60, 2, 0.05, 2);
    for seed in 0..20 {
        let (nodes, ts) = forest_fire_sample(&g, 25, 0.6, seed).unwrap();
        assert_eq!(nodes.len(), 25);
        let keep: BTreeSet<usize> = nodes.iter().copied().collect();
        let induced: Vec<Triplet> = g
            .triplets()
            .iter()
            .filter(|t| keep.contains(&t.head) && keep.contains(&t.tail))
            .copied()
            .collect();
        let got: BTreeSet<Triplet> = ts.into_iter().collect();
        assert_eq!(got, induced.into_iter().collect::<BTreeSet<_>>());
    }
}

#[test]
fn generated_trees_are_trees() {
    let f = generate_fd2(&[5, 3], true);
    let g = KnowledgeGraph::new(f.observed.clone(), f.num_nodes, f.num_relations).unwrap();
    let out: Vec<usize> = (0..f.num_nodes)
        .map(|v| g.triplets().iter().filter(|t| t.head == v).count())
        .collect();
    // every node except the two roots has exactly one parent
    assert_eq!(out.iter().filter(|&&c| c == 0).count(), 2);
    assert!(out.iter().all(|&c| c <= 1));
}

#[test]
fn saved_bundles_reload() {
    let dir = tempfile::tempdir().unwrap();
    let g = random_graph(30, 2, 0.15, 5);
    let b = deqkg::datasets::split_dataset(g.triplets(), 30, 2, &[0.8, 0.2], 4).unwrap();
    b.save(dir.path()).unwrap();
    assert_eq!(DatasetBundle::load(dir.path()).unwrap(), b);
}
