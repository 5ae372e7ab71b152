//! Empirical symmetry audits for scoring functions.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deq::random_graph;
use crate::encoder::{EncoderParams, TripletScorer};
use crate::error::Result;
use crate::features::DistanceCache;
use crate::graph::{KnowledgeGraph, PermutationPair, Triplet};
use crate::rng::{derive_seed, keyed_rng};

pub const AUDIT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailingCase {
    pub trial: usize,
    pub graph_seed: u64,
    pub permutation_seed: u64,
    pub query: Triplet,
    pub original: f64,
    pub permuted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceAudit {
    pub version: u32,
    pub kind: String,
    pub trials: usize,
    pub comparisons: usize,
    pub tolerance: f64,
    pub max_abs_gap: f64,
    pub max_rel_gap: f64,
    pub failing: Vec<FailingCase>,
}

impl InvarianceAudit {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// A scoring function of a graph and a batch of queries.
pub type ScoreFn<'a> = dyn FnMut(&KnowledgeGraph, &[Triplet]) -> Vec<f64> + 'a;

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Scores random graphs and their random node/relation relabellings.
///
/// Graphs have N ∈ [5, 30] nodes, R ∈ [2, 5] relations and edge probability
/// 2/N per relation. A comparison fails when its relative gap exceeds `tol`.
pub fn check_double_invariance(score: &mut ScoreFn<'_>, trials: usize, tol: f64, seed: u64) -> Result<InvarianceAudit> {
    let mut audit = InvarianceAudit {
        version: AUDIT_VERSION,
        kind: "double-invariance".into(),
        trials,
        comparisons: 0,
        tolerance: tol,
        max_abs_gap: 0.0,
        max_rel_gap: 0.0,
        failing: Vec::new(),
    };
    for trial in 0..trials {
        let mut rng = keyed_rng(seed, &[trial as u64]);
        let n = rng.gen_range(5..=30);
        let r = rng.gen_range(2..=5);
        let graph_seed = derive_seed(seed, &[trial as u64, 1]);
        let permutation_seed = derive_seed(seed, &[trial as u64, 2]);
        let g = random_graph(n, r, 2.0 / n as f64, graph_seed);
        let queries: Vec<Triplet> = (0..16)
            .map(|_| Triplet::new(rng.gen_range(0..n), rng.gen_range(0..r), rng.gen_range(0..n)))
            .collect();
        let p = PermutationPair::random(n, r, permutation_seed);
        let pg = g.permute(&p)?;
        let pq: Vec<Triplet> = queries.iter().map(|t| p.apply_triplet(t)).collect();
        let a = score(&g, &queries);
        let b = score(&pg, &pq);
        for ((q, &x), &y) in queries.iter().zip(&a).zip(&b) {
            audit.comparisons += 1;
            let rel = rel_gap(x, y);
            audit.max_abs_gap = audit.max_abs_gap.max((x - y).abs());
            audit.max_rel_gap = audit.max_rel_gap.max(rel);
            if !(rel <= tol) {
                audit.failing.push(FailingCase {
                    trial,
                    graph_seed,
                    permutation_seed,
                    query: *q,
                    original: x,
                    permuted: y,
                });
            }
        }
    }
    Ok(audit)
}

/// Every triplet score as an N×R×N tensor.
pub fn score_tensor(score: &mut ScoreFn<'_>, g: &KnowledgeGraph) -> Array3<f64> {
    let (n, r) = (g.num_nodes(), g.num_relations());
    let all: Vec<Triplet> = (0..n)
        .flat_map(|i| (0..r).flat_map(move |k| (0..n).map(move |j| Triplet::new(i, k, j))))
        .collect();
    Array3::from_shape_vec((n, r, n), score(g, &all)).expect("one score per triplet")
}

/// Checks that the full score tensor is permuted along with the graph:
/// T'[φi, τk, φj] = T[i, k, j] for `num_perms` random pairs, within `tol`
/// absolute.
pub fn check_equivariant_construction(
    score: &mut ScoreFn<'_>,
    g: &KnowledgeGraph,
    num_perms: usize,
    tol: f64,
    seed: u64,
) -> Result<InvarianceAudit> {
    let (n, r) = (g.num_nodes(), g.num_relations());
    let base = score_tensor(score, g);
    let mut audit = InvarianceAudit {
        version: AUDIT_VERSION,
        kind: "equivariant-construction".into(),
        trials: num_perms,
        comparisons: 0,
        tolerance: tol,
        max_abs_gap: 0.0,
        max_rel_gap: 0.0,
        failing: Vec::new(),
    };
    for trial in 0..num_perms {
        let permutation_seed = derive_seed(seed, &[trial as u64]);
        let p = PermutationPair::random(n, r, permutation_seed);
        let permuted = score_tensor(score, &g.permute(&p)?);
        for ((i, k, j), &x) in base.indexed_iter() {
            let y = permuted[[p.node(i), p.relation(k), p.node(j)]];
            audit.comparisons += 1;
            let gap = (x - y).abs();
            audit.max_abs_gap = audit.max_abs_gap.max(gap);
            audit.max_rel_gap = audit.max_rel_gap.max(rel_gap(x, y));
            if !(gap <= tol) {
                audit.failing.push(FailingCase {
                    trial,
                    graph_seed: 0,
                    permutation_seed,
                    query: Triplet::new(i, k, j),
                    original: x,
                    permuted: y,
                });
            }
        }
    }
    Ok(audit)
}

/// The seven-node fixture. Edges point from child to parent; relations 2
/// and 3 appear only in queries.
pub fn expressivity_fixture() -> KnowledgeGraph {
    let ts = vec![
        Triplet::new(1, 0, 0),
        Triplet::new(2, 1, 0),
        Triplet::new(3, 0, 1),
        Triplet::new(4, 1, 1),
        Triplet::new(5, 0, 2),
        Triplet::new(6, 1, 2),
    ];
    KnowledgeGraph::new(ts, 7, 4).expect("fixture is valid")
}

/// Score groups that any doubly invariant model must tie on the fixture.
pub fn expressivity_groups() -> [[Triplet; 4]; 2] {
    [
        [
            Triplet::new(3, 3, 0),
            Triplet::new(6, 3, 0),
            Triplet::new(6, 2, 0),
            Triplet::new(3, 2, 0),
        ],
        [
            Triplet::new(4, 3, 0),
            Triplet::new(5, 3, 0),
            Triplet::new(5, 2, 0),
            Triplet::new(4, 2, 0),
        ],
    ]
}

/// (node, relation) pairs whose embeddings must coincide.
pub fn expressivity_embedding_pairs() -> [((usize, usize), (usize, usize)); 2] {
    [((3, 0), (6, 1)), ((4, 0), (5, 1))]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressivityReport {
    pub version: u32,
    pub groups: Vec<Vec<(Triplet, f64)>>,
    /// Largest within-group score spread.
    pub max_score_gap: f64,
    /// Largest embedding difference over the forced pairs.
    pub max_embedding_gap: f64,
    pub tolerance: f64,
}

impl ExpressivityReport {
    /// True when every forced equality holds.
    pub fn holds(&self) -> bool {
        self.max_score_gap <= self.tolerance && self.max_embedding_gap <= self.tolerance
    }
}

/// Distance feature used by the scorer; the override replaces it for
/// negative controls.
pub type DistanceOverride<'a> = dyn Fn(&Triplet) -> [f64; 2] + 'a;

/// Scores the fixture's forced-equality groups with an encoder.
pub fn expressivity_counterexample(
    params: &EncoderParams,
    distance_override: Option<&DistanceOverride<'_>>,
    tol: f64,
) -> ExpressivityReport {
    let g = expressivity_fixture();
    let scorer = TripletScorer::new(params, &g);
    let mut cache = DistanceCache::new(&g, params.config.distance_cap);
    let mut groups = Vec::new();
    let mut max_score_gap: f64 = 0.0;
    for group in expressivity_groups() {
        let feats: Vec<[f64; 2]> = group
            .iter()
            .map(|t| match distance_override {
                Some(f) => f(t),
                None => cache.feature(t).encoded(),
            })
            .collect();
        let scores: Vec<f64> = scorer
            .logits_with_features(&group, &feats)
            .into_iter()
            .map(crate::nn::sigmoid)
            .collect();
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max_score_gap = max_score_gap.max(hi - lo);
        groups.push(group.iter().copied().zip(scores).collect());
    }
    let emb = scorer.embeddings();
    let max_embedding_gap = expressivity_embedding_pairs()
        .iter()
        .map(|&((a, ka), (b, kb))| {
            (&emb.x(a, ka) - &emb.x(b, kb))
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .fold(0.0, f64::max);
    ExpressivityReport {
        version: AUDIT_VERSION,
        groups,
        max_score_gap,
        max_embedding_gap,
        tolerance: tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, score_triplets, EncoderConfig};

    fn params(seed: u64) -> EncoderParams {
        init_encoder(&EncoderConfig {
            hidden_dim: 8,
            mlp_hidden_dims: vec![8],
            seed,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn encoder_passes_the_audit() {
        let p = params(1);
        let audit = check_double_invariance(&mut |g, q| score_triplets(&p, g, q), 10, 1e-5, 0).unwrap();
        assert!(audit.passed(), "{:?}", audit.failing.first());
        assert_eq!(audit.comparisons, 160);
    }

    #[test]
    fn index_leak_fails_the_audit() {
        let p = params(1);
        let mut leak = |g: &KnowledgeGraph, q: &[Triplet]| {
            let s = score_triplets(&p, g, q);
            s.iter().zip(q).map(|(x, t)| x + 0.01 * t.head as f64).collect()
        };
        assert!(!check_double_invariance(&mut leak, 5, 1e-5, 0).unwrap().passed());
    }

    #[test]
    fn fixture_symmetries_hold() {
        let rep = expressivity_counterexample(&params(2), None, 1e-10);
        assert!(rep.holds(), "{rep:?}");
        let leak = |t: &Triplet| [t.head as f64 / 7.0, t.tail as f64 / 7.0];
        assert!(!expressivity_counterexample(&params(2), Some(&leak), 1e-10).holds());
    }
}
