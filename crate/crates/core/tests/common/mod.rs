#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet, VecDeque};

use deqkg::datasets::{fd2_clauses, generate_fd2, sample_subgraph, split_dataset, uqer_derive_all};
use deqkg::deq::{random_graph, trend_trial, RandomFeatureScorer, TREND_DRAWS};
use deqkg::encoder::EncoderParams;
use deqkg::nn::{sigmoid, softplus};
use deqkg::rng::keyed_rng;
use deqkg::{KnowledgeGraph, PermutationPair, Triplet};
use rand::Rng;

/// Mean over positives of `softplus(−z_p) + mean_q softplus(z_pq)`, with
/// queries laid out as one positive followed by its negatives.
pub fn grouped_loss(z: &[f64], group: usize) -> f64 {
    let groups = z.len() / group;
    z.chunks(group)
        .map(|c| softplus(-c[0]) + c[1..].iter().map(|&x| softplus(x)).sum::<f64>() / (group - 1) as f64)
        .sum::<f64>()
        / groups as f64
}

pub fn grouped_dloss(z: &[f64], group: usize) -> Vec<f64> {
    let groups = (z.len() / group) as f64;
    z.iter()
        .enumerate()
        .map(|(i, &x)| {
            if i % group == 0 {
                -sigmoid(-x) / groups
            } else {
                sigmoid(x) / ((group - 1) as f64 * groups)
            }
        })
        .collect()
}

/// Relative error of the analytic gradient against central differences,
/// one entry per named parameter tensor.
pub fn gradient_check(
    params: &EncoderParams,
    g: &KnowledgeGraph,
    queries: &[Triplet],
    group: usize,
    step: f64,
) -> Vec<(String, f64)> {
    let op = params.operator(g);
    let dists = deqkg::features::distance_features(g, queries, params.config.distance_cap);
    let eval = |p: &EncoderParams| grouped_loss(&p.forward_batch(&op, queries, &dists).logits, group);
    let fwd = params.forward_batch(&op, queries, &dists);
    let grad = fwd.backward(&grouped_dloss(&fwd.logits, group));
    let analytic: Vec<(String, Vec<f64>)> = grad
        .named_tensors()
        .into_iter()
        .map(|(name, _, v)| (name, v.to_vec()))
        .collect();
    let mut out = Vec::new();
    for (t, (name, a)) in analytic.iter().enumerate() {
        let mut fd = vec![0.0; a.len()];
        for (idx, slot) in fd.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[t][idx] += step;
            let mut minus = params.clone();
            minus.tensors_mut()[t][idx] -= step;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        let diff = a.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nf = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if na.max(nf) < 1e-9 { diff } else { diff / na.max(nf) };
        out.push((name.clone(), rel));
    }
    out
}

/// Six nodes, two relations, with a cycle so every channel is used.
pub fn gradient_fixture() -> (KnowledgeGraph, Vec<Triplet>) {
    let g = KnowledgeGraph::new(
        vec![
            Triplet::new(0, 0, 1),
            Triplet::new(1, 0, 2),
            Triplet::new(2, 1, 3),
            Triplet::new(3, 1, 4),
            Triplet::new(4, 0, 5),
            Triplet::new(5, 1, 0),
            Triplet::new(1, 1, 4),
        ],
        6,
        2,
    )
    .unwrap();
    let queries = vec![
        Triplet::new(0, 0, 2),
        Triplet::new(0, 0, 4),
        Triplet::new(0, 1, 2),
        Triplet::new(2, 1, 4),
        Triplet::new(3, 1, 4),
        Triplet::new(2, 0, 4),
    ];
    (g, queries)
}

pub fn fd2_graph(depths: &[u32]) -> (KnowledgeGraph, Vec<Triplet>) {
    let f = generate_fd2(depths, true);
    (KnowledgeGraph::new(f.observed, f.num_nodes, f.num_relations).unwrap(), f.queries)
}

/// Node, observed and query counts of a single tree against closed forms.
pub fn fd2_counts_match(depth: u32) -> Result<(), String> {
    let f = generate_fd2(&[depth], true);
    let nodes = (1usize << (depth + 1)) - 1;
    let queries: usize = (2..=depth).map(|d| 1usize << d).sum();
    let got = (f.num_nodes, f.observed.len(), f.queries.len());
    if got == (nodes, nodes - 1, queries) {
        Ok(())
    } else {
        Err(format!("depth {depth}: got {got:?}, want {:?}", (nodes, nodes - 1, queries)))
    }
}

pub fn uqer_matches_generator(depth: u32) -> Result<(), String> {
    let (g, queries) = fd2_graph(&[depth]);
    let derived = uqer_derive_all(&fd2_clauses(), &g).map_err(|e| e.to_string())?;
    let want: BTreeSet<Triplet> = queries.into_iter().collect();
    if derived == want {
        Ok(())
    } else {
        Err(format!("depth {depth}: derived {} triplets, generator {}", derived.len(), want.len()))
    }
}

/// `derive(φ·g) = φ·derive(g)` on random graphs with at most 12 nodes.
pub fn uqer_commutes_with_permutations(graphs: usize, seed: u64) -> Result<(), String> {
    let clauses = fd2_clauses();
    for trial in 0..graphs as u64 {
        let mut rng = keyed_rng(seed, &[trial]);
        let n = rng.gen_range(3..=12);
        let r = rng.gen_range(2..=4);
        let g = random_graph(n, r, 0.25, seed ^ trial);
        let p = PermutationPair::random(n, r, seed.wrapping_add(trial));
        let a: BTreeSet<Triplet> = uqer_derive_all(&clauses, &g)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|t| p.apply_triplet(t))
            .collect();
        let b = uqer_derive_all(&clauses, &g.permute(&p).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("trial {trial}: sets differ ({} vs {})", a.len(), b.len()));
        }
    }
    Ok(())
}

fn undirected_connected(ts: &[Triplet]) -> bool {
    let Some(first) = ts.first() else { return true };
    let mut seen = HashSet::from([first.head]);
    let mut queue = VecDeque::from([first.head]);
    while let Some(u) = queue.pop_front() {
        for t in ts {
            for (a, b) in [(t.head, t.tail), (t.tail, t.head)] {
                if a == u && seen.insert(b) {
                    queue.push_back(b);
                }
            }
        }
    }
    ts.iter().all(|t| seen.contains(&t.head) && seen.contains(&t.tail))
}

/// Budgets, membership and connectivity of the BFS sampler over seeded runs.
pub fn sampler_respects_budgets(runs: u64) -> Result<(), String> {
    for run in 0..runs {
        let mut rng = keyed_rng(run, &[0x5a]);
        let n = rng.gen_range(10..60);
        let g = random_graph(n, rng.gen_range(1..4), 3.0 / n as f64, run);
        if g.is_empty() {
            continue;
        }
        let max_nodes = rng.gen_range(2..30);
        let max_triplets = rng.gen_range(1..50);
        let max_per_node = rng.gen_range(1..6);
        let ts = sample_subgraph(&g, max_nodes, max_triplets, max_per_node, run).map_err(|e| e.to_string())?;
        let nodes: HashSet<usize> = ts.iter().flat_map(|t| [t.head, t.tail]).collect();
        if ts.len() > max_triplets || nodes.len() > max_nodes {
            return Err(format!("run {run}: {} triplets / {} nodes over budget", ts.len(), nodes.len()));
        }
        if ts.len() > max_per_node * nodes.len() {
            return Err(format!("run {run}: more triplets than the per-node cap allows"));
        }
        if ts.is_empty() || !ts.iter().all(|t| g.contains(t)) {
            return Err(format!("run {run}: sample is empty or not a subgraph"));
        }
        if !undirected_connected(&ts) {
            return Err(format!("run {run}: sample is disconnected"));
        }
    }
    Ok(())
}

/// Every valid and test node of a random split keeps an observed triplet.
/// Returns the number of runs that produced a split.
pub fn split_keeps_query_nodes(runs: u64) -> Result<usize, String> {
    let mut done = 0;
    for run in 0..runs {
        let mut rng = keyed_rng(run, &[0x59]);
        let n = rng.gen_range(8..40);
        let g = random_graph(n, rng.gen_range(1..4), 4.0 / n as f64, run);
        let b = match split_dataset(g.triplets(), n, g.num_relations(), &[0.8, 0.1, 0.1], run) {
            Ok(b) => b,
            Err(deqkg::Error::Coverage { .. }) => continue,
            Err(e) => return Err(e.to_string()),
        };
        let observed: HashSet<usize> = b.observed.triplets().iter().flat_map(|t| [t.head, t.tail]).collect();
        for t in b.valid.iter().chain(&b.test) {
            if !observed.contains(&t.head) || !observed.contains(&t.tail) {
                return Err(format!("run {run}: query {t} orphans a node"));
            }
        }
        let total = b.observed.num_triplets() + b.valid.len() + b.test.len();
        if total != g.num_triplets() {
            return Err(format!("run {run}: {total} triplets after split, {} before", g.num_triplets()));
        }
        done += 1;
    }
    Ok(done)
}

/// Invariance-gap rows for one trial at [`deqkg::deq::TREND_DRAWS`].
pub fn deq_gaps(trial: u64) -> Vec<f64> {
    let scorer = RandomFeatureScorer::new(8, 2, 7);
    trend_trial(&scorer, &TREND_DRAWS, trial, 0)
}

pub fn log_log_slope(gaps: &[f64]) -> f64 {
    deqkg::deq::log_log_slope(&TREND_DRAWS, gaps)
}

/// Uniform random scores ranked over `queries` random node queries. Returns
/// `(metric, observed, analytic, standard error)` rows.
pub fn empirical_random_scorer(queries: usize, seed: u64) -> Vec<(String, f64, f64, f64)> {
    use deqkg::eval::{evaluate, random_baseline, EvalProtocol, FnScorer, Task};
    let n = 300;
    let g = random_graph(n, 3, 0.01, seed);
    let mut rng = keyed_rng(seed, &[0x9]);
    let mut qs = BTreeSet::new();
    while qs.len() < queries {
        qs.insert(Triplet::new(rng.gen_range(0..n), rng.gen_range(0..3), rng.gen_range(0..n)));
    }
    let qs: Vec<Triplet> = qs.into_iter().collect();
    let mut score_rng = keyed_rng(seed, &[0xa]);
    let mut scorer = FnScorer(|b: &[Triplet]| b.iter().map(|_| score_rng.gen::<f64>()).collect());
    let protocol = EvalProtocol::default();
    let report = evaluate(&mut scorer, &g, &qs, &[], Task::Node, &protocol).unwrap();
    let base = random_baseline(protocol.num_negatives, &protocol.ks);
    let se = |xs: Vec<f64>| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        (var / xs.len() as f64).sqrt()
    };
    let mut rows = vec![(
        "MRR".to_string(),
        report.mrr,
        base.mrr,
        se(report.ranks.iter().map(|r| r.expected_reciprocal_rank()).collect()),
    )];
    for &k in &protocol.ks {
        rows.push((
            format!("Hits@{k}"),
            report.hits[&k],
            base.hits[&k],
            se(report.ranks.iter().map(|r| r.expected_hits(k)).collect()),
        ));
    }
    rows
}
