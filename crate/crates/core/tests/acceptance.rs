//! Acceptance gate. Prints one line per criterion and exits non-zero when
//! any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use deqkg::datasets::{fd2_test_bundle, fd2_train_bundle};
use deqkg::deq::{permute_rows, random_graph, PositionalScorer, RandomFeatureScorer};
use deqkg::encoder::{init_encoder, score_triplets, EncoderConfig, EncoderParams, TripletScorer};
use deqkg::eval::{evaluate, random_baseline, EvalProtocol, RelationNegatives, Task};
use deqkg::training::{train_with, TrainConfig, TrainGraph, TrainOptions, Validation};
use deqkg::verify::{check_double_invariance, expressivity_counterexample};
use deqkg::{PermutationPair, Triplet};

const FD2_SEEDS: u64 = 5;
const FD2_LR: f64 = 0.01;

struct Fd2Run {
    params: EncoderParams,
    node_hits2: f64,
    relation_mrr: f64,
    relation_mrr_all_others: f64,
    seconds: f64,
}

fn train_fd2(seed: u64) -> Fd2Run {
    let start = Instant::now();
    let train = fd2_train_bundle(&[6], 0.1, seed).unwrap();
    let test = fd2_test_bundle(&[6, 6]).unwrap();
    let params = init_encoder(&EncoderConfig {
        num_layers: 2,
        hidden_dim: 32,
        seed,
        ..EncoderConfig::default()
    })
    .unwrap();
    let config = TrainConfig {
        learning_rate: FD2_LR,
        patience: None,
        seed,
        ..TrainConfig::default()
    };
    let validation = Validation::from_bundle(&train, EvalProtocol { seed, ..EvalProtocol::default() });
    let (params, _) = train_with(
        &params,
        &[TrainGraph::from_bundle(&train)],
        &config,
        TrainOptions {
            validation: validation.as_ref(),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let protocol = EvalProtocol {
        seed,
        ks: vec![1, 2, 10],
        ..EvalProtocol::default()
    };
    let known = test.known();
    let mut scorer = TripletScorer::new(&params, &test.observed);
    let node = evaluate(&mut scorer, &test.observed, &test.test, &known, Task::Node, &protocol).unwrap();
    let rel = evaluate(&mut scorer, &test.observed, &test.test, &known, Task::Relation, &protocol).unwrap();
    let all_others = EvalProtocol {
        relation_negatives: RelationNegatives::AllOthers,
        ..protocol.clone()
    };
    let rel_all = evaluate(&mut scorer, &test.observed, &test.test, &known, Task::Relation, &all_others).unwrap();
    drop(scorer);
    Fd2Run {
        node_hits2: node.hits[&2],
        relation_mrr: rel.mrr,
        relation_mrr_all_others: rel_all.mrr,
        seconds: start.elapsed().as_secs_f64(),
        params,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn small_params(seed: u64) -> EncoderParams {
    init_encoder(&EncoderConfig {
        hidden_dim: 16,
        mlp_hidden_dims: vec![16],
        seed,
        ..EncoderConfig::default()
    })
    .unwrap()
}

type Outcome = Result<String, String>;

fn criterion_1(trained: &EncoderParams) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (label, params) in [("untrained", &small_params(0)), ("trained", trained)] {
        let audit = check_double_invariance(&mut |g, q| score_triplets(params, g, q), 100, 1e-5, 1).unwrap();
        worst = worst.max(audit.max_rel_gap);
        if !audit.passed() {
            return Err(format!("{label}: {} failing comparisons, max rel gap {:.2e}", audit.failing.len(), audit.max_rel_gap));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 120.0 {
        return Err(format!("took {secs:.1}s"));
    }
    Ok(format!("max rel gap {worst:.2e} over 2 x 100 trials in {secs:.1}s"))
}

fn criterion_2() -> Outcome {
    let b = random_baseline(50, &[1, 5, 10]);
    let checks = [
        ("Hits@10", b.hits[&10], 10.0 / 51.0, 19.60),
        ("Hits@5", b.hits[&5], 5.0 / 51.0, 9.80),
        ("Hits@1", b.hits[&1], 1.0 / 51.0, 1.96),
        ("MRR", b.mrr, (1..=51).map(|r| 1.0 / r as f64).sum::<f64>() / 51.0, 8.86),
    ];
    for (name, got, oracle, printed) in checks {
        if (got - oracle).abs() > 1e-12 {
            return Err(format!("{name}: {got} vs oracle {oracle}"));
        }
        // printed to two decimals in percent; truncation and rounding both accepted
        let pct = got * 100.0;
        if ((pct * 100.0).round() / 100.0 - printed).abs() > 1e-9 && ((pct * 100.0).floor() / 100.0 - printed).abs() > 1e-9 {
            return Err(format!("{name}: {pct:.4}% does not print as {printed}"));
        }
    }
    for (name, got, want, se) in common::empirical_random_scorer(2000, 7) {
        if (got - want).abs() > 3.0 * se {
            return Err(format!("empirical {name}: {got:.4} vs {want:.4}, se {se:.4}"));
        }
    }
    Ok(format!("MRR {:.5}, Hits@10 {:.5}; empirical scorer within 3 SE on 2000 queries", b.mrr, b.hits[&10]))
}

fn criterion_3(runs: &[Fd2Run]) -> Outcome {
    let base = random_baseline(50, &[1]).mrr;
    let node = median(runs.iter().map(|r| r.node_hits2).collect());
    let rel = median(runs.iter().map(|r| r.relation_mrr).collect());
    let rel_all = median(runs.iter().map(|r| r.relation_mrr_all_others).collect());
    let base_all = random_baseline(3, &[1]).mrr;
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let line = format!(
        "median node Hits@2 {node:.3}, relation MRR {rel:.3} (bar {:.3}), all-others relation MRR {rel_all:.3} (random {base_all:.3}), slowest seed {slowest:.1}s",
        3.0 * base
    );
    if node >= 0.80 && rel >= 3.0 * base && rel_all > base_all && slowest <= 900.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_4() -> Outcome {
    for depth in 2..=4 {
        common::uqer_matches_generator(depth)?;
    }
    common::uqer_commutes_with_permutations(50, 11)?;
    Ok("clause set equals generator queries for depths 2-4; commutes on 50 graphs".into())
}

fn criterion_5(trained: &EncoderParams) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let rep = expressivity_counterexample(&small_params(100 + seed), None, 1e-5);
        worst = worst.max(rep.max_score_gap);
        if !rep.holds() {
            return Err(format!("draw {seed}: score gap {:.2e}", rep.max_score_gap));
        }
    }
    let rep = expressivity_counterexample(trained, None, 1e-5);
    if !rep.holds() {
        return Err(format!("trained: score gap {:.2e}", rep.max_score_gap));
    }
    worst = worst.max(rep.max_score_gap);
    Ok(format!("8 forced equalities hold on 10 draws and the trained model, max gap {worst:.2e}"))
}

fn criterion_6() -> Outcome {
    let gaps: Vec<Vec<f64>> = (0..20).map(common::deq_gaps).collect();
    let shrinking = gaps[..10].iter().filter(|g| g[3] < g[0]).count();
    let slope = gaps.iter().map(|g| common::log_log_slope(g)).sum::<f64>() / gaps.len() as f64;
    let s = RandomFeatureScorer::new(8, 2, 3);
    let g = random_graph(12, 3, 0.2, 5);
    let q: Vec<Triplet> = (0..12).map(|i| Triplet::new(i, i % 3, (i + 5) % 12)).collect();
    let (v0, r0) = s.sample_features(&g, 9);
    let base = s.score_with(&g, &q, &v0, &r0);
    let mut equi: f64 = 0.0;
    for seed in 0..10 {
        let p = PermutationPair::random(12, 3, seed);
        let pq: Vec<Triplet> = q.iter().map(|t| p.apply_triplet(t)).collect();
        let got = s.score_with(
            &g.permute(&p).unwrap(),
            &pq,
            &permute_rows(&v0, |i| p.node(i)),
            &permute_rows(&r0, |k| p.relation(k)),
        );
        for (a, b) in base.iter().zip(&got) {
            equi = equi.max((a - b).abs());
        }
    }
    let line = format!("gap shrank in {shrinking}/10 trials, mean slope {slope:.3}, conditional equivariance error {equi:.1e}");
    if shrinking >= 9 && (-0.65..=-0.35).contains(&slope) && equi <= 1e-10 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_7() -> Outcome {
    let (g, queries) = common::gradient_fixture();
    let params = init_encoder(&EncoderConfig {
        hidden_dim: 4,
        mlp_hidden_dims: vec![4],
        seed: 5,
        ..EncoderConfig::default()
    })
    .unwrap();
    let errs = common::gradient_check(&params, &g, &queries, 3, 1e-5);
    let (name, worst) = errs
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    if worst <= 1e-3 {
        Ok(format!("{} parameter groups, worst relative error {worst:.2e} ({name})", errs.len()))
    } else {
        Err(format!("{name}: relative error {worst:.2e}"))
    }
}

fn criterion_8() -> Outcome {
    for depth in 1..=8 {
        common::fd2_counts_match(depth)?;
    }
    common::sampler_respects_budgets(100)?;
    let splits = common::split_keeps_query_nodes(100)?;
    Ok(format!("tree counts for depths 1-8; sampler on 100 runs; {splits} orphan-free splits"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let runs: Vec<Fd2Run> = (0..FD2_SEEDS).map(train_fd2).collect();
    let trained = &runs[0].params;
    let results: Vec<(usize, &str, Outcome)> = vec![
        (1, "double invariance", criterion_1(trained)),
        (2, "random baseline", criterion_2()),
        (3, "tree benchmark learning", criterion_3(&runs)),
        (4, "clause oracle", criterion_4()),
        (5, "forced equalities", criterion_5(trained)),
        (6, "averaged random features", criterion_6()),
        (7, "gradient check", criterion_7()),
        (8, "dataset algorithms", criterion_8()),
    ];
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(msg) => println!("criterion {n} ({name}): PASS: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {msg}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
