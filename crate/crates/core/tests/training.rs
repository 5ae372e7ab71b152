mod common;

use deqkg::datasets::{fd2_test_bundle, fd2_train_bundle};
use deqkg::encoder::{init_encoder, EncoderConfig, TripletScorer};
use deqkg::eval::{evaluate, EvalProtocol, Task};
use deqkg::training::{
    train, train_with, PermutedSampler, TrainConfig, TrainGraph, TrainOptions, UniformNegatives,
};
use deqkg::{KnowledgeGraph, PermutationPair, Triplet};

fn small_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 8,
        mlp_hidden_dims: vec![8],
        seed,
        ..EncoderConfig::default()
    }
}

fn fd2_source(depth: u32) -> (KnowledgeGraph, Vec<Triplet>) {
    common::fd2_graph(&[depth])
}

#[test]
fn permuting_the_training_graph_keeps_the_loss_sequence() {
    let (g, targets) = fd2_source(4);
    let p = PermutationPair::random(g.num_nodes(), g.num_relations(), 17);
    let pg = g.permute(&p).unwrap();
    let ptargets: Vec<Triplet> = targets.iter().map(|t| p.apply_triplet(t)).collect();
    let params = init_encoder(&small_config(3)).unwrap();
    let config = TrainConfig {
        epochs: 3,
        learning_rate: 0.01,
        patience: None,
        seed: 5,
        ..TrainConfig::default()
    };
    let (_, base) = train_with(&params, &[TrainGraph::fixed(g, targets)], &config, TrainOptions::default()).unwrap();
    let sampler = PermutedSampler::new(UniformNegatives::from_config(&config), p);
    let (_, moved) = train_with(
        &params,
        &[TrainGraph::fixed(pg, ptargets)],
        &config,
        TrainOptions {
            sampler: Some(&sampler),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    for (a, b) in base.losses().iter().zip(moved.losses()) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    assert_eq!(base.losses().len(), 3);
}

#[test]
fn fixed_seeds_reproduce_the_history() {
    let (g, _) = fd2_source(3);
    let params = init_encoder(&small_config(1)).unwrap();
    let config = TrainConfig {
        epochs: 2,
        patience: None,
        seed: 2,
        ..TrainConfig::default()
    };
    let (pa, a) = train(&params, &[g.clone()], &config).unwrap();
    let (pb, b) = train(&params, &[g], &config).unwrap();
    assert_eq!(a.losses(), b.losses());
    assert_eq!(pa, pb);
}

#[test]
fn two_trees_train_and_a_third_evaluates() {
    let a = fd2_train_bundle(&[4], 0.1, 0).unwrap();
    let b = fd2_train_bundle(&[5], 0.1, 1).unwrap();
    let params = init_encoder(&small_config(0)).unwrap();
    let config = TrainConfig {
        epochs: 2,
        learning_rate: 0.01,
        patience: None,
        ..TrainConfig::default()
    };
    let sources = [TrainGraph::from_bundle(&a), TrainGraph::from_bundle(&b)];
    let (trained, history) = train_with(&params, &sources, &config, TrainOptions::default()).unwrap();
    assert_eq!(history.records.len(), 2);
    let test = fd2_test_bundle(&[3]).unwrap();
    let mut scorer = TripletScorer::new(&trained, &test.observed);
    let report = evaluate(&mut scorer, &test.observed, &test.test, &test.known(), Task::Node, &EvalProtocol::default()).unwrap();
    assert_eq!(report.num_queries, test.test.len());
    assert!(report.mrr > 0.0 && report.mrr <= 1.0);
}

#[test]
fn fd2_loss_falls_over_the_first_three_epochs() {
    let mut decreasing = 0;
    for seed in 0..5u64 {
        let bundle = fd2_train_bundle(&[6], 0.1, seed).unwrap();
        let params = init_encoder(&EncoderConfig { seed, ..EncoderConfig::default() }).unwrap();
        let config = TrainConfig {
            epochs: 3,
            patience: None,
            seed,
            ..TrainConfig::default()
        };
        let (_, h) = train_with(&params, &[TrainGraph::from_bundle(&bundle)], &config, TrainOptions::default()).unwrap();
        let l = h.losses();
        if l[0] > l[1] && l[1] > l[2] {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 3, "only {decreasing} of 5 seeds decreased");
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (g, queries) = common::gradient_fixture();
    for aggregation in ["mean", "sum"] {
        let params = init_encoder(&EncoderConfig {
            hidden_dim: 4,
            mlp_hidden_dims: vec![4],
            aggregation: aggregation.parse().unwrap(),
            seed: 11,
            ..EncoderConfig::default()
        })
        .unwrap();
        for (name, rel) in common::gradient_check(&params, &g, &queries, 3, 1e-5) {
            assert!(rel <= 1e-3, "{aggregation} {name}: {rel}");
        }
    }
}
