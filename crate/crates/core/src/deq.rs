//! Averaging random-feature scorers over independent draws.
//!
//! A positional scorer is only equivariant once its random node and relation
//! features are permuted along with the graph. Averaging its scores over many
//! independent draws approaches a doubly invariant score.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{KnowledgeGraph, PermutationPair, Triplet};
use crate::nn::glorot;
use crate::rng::{derive_seed, keyed_rng};

/// Scorer whose output depends on random per-node and per-relation features.
pub trait PositionalScorer {
    /// Width of the node features (rows are nodes).
    fn node_dim(&self) -> usize;
    /// Width of the relation features (rows are relations).
    fn relation_dim(&self) -> usize;

    /// Scores with explicit raw features `v0` (N×node_dim) and `r0`
    /// (R×relation_dim).
    fn score_with(&self, g: &KnowledgeGraph, queries: &[Triplet], v0: &Array2<f64>, r0: &Array2<f64>)
        -> Vec<f64>;

    /// Glorot-uniform features for one draw.
    fn sample_features(&self, g: &KnowledgeGraph, draw_seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = keyed_rng(draw_seed, &[0xfea7]);
        let v0 = glorot(g.num_nodes(), self.node_dim(), &mut rng);
        let r0 = glorot(g.num_relations(), self.relation_dim(), &mut rng);
        (v0, r0)
    }
}

/// Random features refined by a few rounds of fixed-weight message passing,
/// read out DistMult style as Σ V_i ⊙ R_k ⊙ V_j.
#[derive(Debug, Clone)]
pub struct RandomFeatureScorer {
    dim: usize,
    w_rel: Array2<f64>,
    w_self: Vec<Array2<f64>>,
    w_in: Vec<Array2<f64>>,
    w_out: Vec<Array2<f64>>,
}

impl RandomFeatureScorer {
    /// `seed` fixes the message-passing weights, not the features.
    pub fn new(dim: usize, layers: usize, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, &[0x5c0e]);
        let mut draw = || glorot(dim, dim, &mut rng);
        let w_rel = draw();
        let mut w_self = Vec::new();
        let mut w_in = Vec::new();
        let mut w_out = Vec::new();
        for _ in 0..layers {
            w_self.push(draw());
            w_in.push(draw());
            w_out.push(draw());
        }
        Self { dim, w_rel, w_self, w_in, w_out }
    }

    pub fn num_layers(&self) -> usize {
        self.w_self.len()
    }

    /// Refined relation features: one round over the relation graph.
    fn relations(&self, g: &KnowledgeGraph, r0: &Array2<f64>) -> Array2<f64> {
        let a = relation_graph(g);
        let mixed = a.dot(r0).dot(&self.w_rel);
        (r0 + &mixed).mapv(f64::tanh)
    }

    /// Node features after message passing.
    fn nodes(&self, g: &KnowledgeGraph, v0: &Array2<f64>, rel: &Array2<f64>) -> Array2<f64> {
        let n = g.num_nodes();
        let mut deg_in = vec![0usize; n];
        let mut deg_out = vec![0usize; n];
        for t in g.triplets() {
            deg_out[t.head] += 1;
            deg_in[t.tail] += 1;
        }
        let mut v = v0.clone();
        for l in 0..self.num_layers() {
            let mut m_in = Array2::<f64>::zeros((n, self.dim));
            let mut m_out = Array2::<f64>::zeros((n, self.dim));
            for t in g.triplets() {
                let r = rel.row(t.relation);
                let from_head = &v.row(t.head) * &r;
                let from_tail = &v.row(t.tail) * &r;
                m_in.row_mut(t.tail).scaled_add(1.0 / deg_in[t.tail] as f64, &from_head);
                m_out.row_mut(t.head).scaled_add(1.0 / deg_out[t.head] as f64, &from_tail);
            }
            v = (v.dot(&self.w_self[l]) + m_in.dot(&self.w_in[l]) + m_out.dot(&self.w_out[l])).mapv(f64::tanh);
        }
        v
    }
}

impl PositionalScorer for RandomFeatureScorer {
    fn node_dim(&self) -> usize {
        self.dim
    }

    fn relation_dim(&self) -> usize {
        self.dim
    }

    fn score_with(
        &self,
        g: &KnowledgeGraph,
        queries: &[Triplet],
        v0: &Array2<f64>,
        r0: &Array2<f64>,
    ) -> Vec<f64> {
        let rel = self.relations(g, r0);
        let v = self.nodes(g, v0, &rel);
        queries
            .iter()
            .map(|t| {
                let prod: Array1<f64> = &v.row(t.head) * &rel.row(t.relation) * v.row(t.tail);
                prod.sum()
            })
            .collect()
    }
}

/// Relation adjacency weighted by shared endpoints, rows normalised to 1.
pub fn relation_graph(g: &KnowledgeGraph) -> Array2<f64> {
    let r = g.num_relations();
    let n = g.num_nodes();
    let mut touches = Array2::<f64>::zeros((n, r));
    for t in g.triplets() {
        touches[[t.head, t.relation]] = 1.0;
        touches[[t.tail, t.relation]] = 1.0;
    }
    let mut a = touches.t().dot(&touches);
    for mut row in a.axis_iter_mut(Axis(0)) {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    a
}

/// Scores under one feature draw.
pub fn positional_score<S: PositionalScorer + ?Sized>(
    scorer: &S,
    g: &KnowledgeGraph,
    queries: &[Triplet],
    draw_seed: u64,
) -> Vec<f64> {
    let (v0, r0) = scorer.sample_features(g, draw_seed);
    scorer.score_with(g, queries, &v0, &r0)
}

/// Mean score over `draws` draws seeded `derive_seed(seed, [m])`.
pub fn deq_score<S: PositionalScorer + ?Sized>(
    scorer: &S,
    g: &KnowledgeGraph,
    queries: &[Triplet],
    draws: usize,
    seed: u64,
) -> Vec<f64> {
    assert!(draws > 0, "need at least one draw");
    let mut acc = vec![0.0; queries.len()];
    for m in 0..draws {
        let s = positional_score(scorer, g, queries, derive_seed(seed, &[m as u64]));
        for (a, x) in acc.iter_mut().zip(s) {
            *a += x;
        }
    }
    acc.iter().map(|a| a / draws as f64).collect()
}

/// Largest absolute score difference between `g` and each permuted copy.
///
/// The original and every permuted side use their own seed streams unless
/// `shared_seeds` is set, in which case all sides reuse `seed`.
pub fn invariance_gap_with<S: PositionalScorer + ?Sized>(
    scorer: &S,
    g: &KnowledgeGraph,
    queries: &[Triplet],
    perms: &[PermutationPair],
    draws: usize,
    seed: u64,
    shared_seeds: bool,
) -> crate::Result<f64> {
    let base_seed = if shared_seeds { seed } else { derive_seed(seed, &[0]) };
    let base = deq_score(scorer, g, queries, draws, base_seed);
    let mut gap: f64 = 0.0;
    for (p_idx, p) in perms.iter().enumerate() {
        let pg = g.permute(p)?;
        let pq: Vec<Triplet> = queries.iter().map(|t| p.apply_triplet(t)).collect();
        let side_seed = if shared_seeds { seed } else { derive_seed(seed, &[1, p_idx as u64]) };
        let other = deq_score(scorer, &pg, &pq, draws, side_seed);
        for (a, b) in base.iter().zip(&other) {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(gap)
}

/// [`invariance_gap_with`] with independent seed streams per side.
pub fn invariance_gap<S: PositionalScorer + ?Sized>(
    scorer: &S,
    g: &KnowledgeGraph,
    queries: &[Triplet],
    perms: &[PermutationPair],
    draws: usize,
    seed: u64,
) -> crate::Result<f64> {
    invariance_gap_with(scorer, g, queries, perms, draws, seed, false)
}

/// Draw counts used by [`deq_trend`].
pub const TREND_DRAWS: [usize; 4] = [1, 4, 16, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeqTrend {
    pub draws: Vec<usize>,
    /// One row of gaps per trial, aligned with `draws`.
    pub gaps: Vec<Vec<f64>>,
    /// Per-trial least-squares slope of ln gap against ln M.
    pub slopes: Vec<f64>,
    pub mean_slope: f64,
    /// Trials whose gap at the largest M is below the gap at the smallest.
    pub shrinking: usize,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[usize], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|&m| (m as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|g| g.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Gap of one trial: a random 10-node, 3-relation graph, ten fixed queries
/// and one random permutation pair, with independent seed streams.
pub fn trend_trial<S: PositionalScorer + ?Sized>(scorer: &S, draws: &[usize], trial: u64, seed: u64) -> Vec<f64> {
    let g = random_graph(10, 3, 0.25, derive_seed(seed, &[trial, 0]));
    let queries: Vec<Triplet> = (0..10).map(|i| Triplet::new(i, i % 3, (i * 3 + 1) % 10)).collect();
    let perms = [PermutationPair::random(10, 3, derive_seed(seed, &[trial, 1]))];
    draws
        .iter()
        .map(|&m| invariance_gap(scorer, &g, &queries, &perms, m, derive_seed(seed, &[trial, 2])).expect("sizes match"))
        .collect()
}

/// Invariance gap against the number of draws over `trials` trials.
pub fn deq_trend<S: PositionalScorer + ?Sized>(scorer: &S, trials: usize, seed: u64) -> DeqTrend {
    let draws = TREND_DRAWS.to_vec();
    let gaps: Vec<Vec<f64>> = (0..trials as u64).map(|t| trend_trial(scorer, &draws, t, seed)).collect();
    let slopes: Vec<f64> = gaps.iter().map(|g| log_log_slope(&draws, g)).collect();
    let last = draws.len() - 1;
    DeqTrend {
        mean_slope: slopes.iter().sum::<f64>() / slopes.len().max(1) as f64,
        shrinking: gaps.iter().filter(|g| g[last] < g[0]).count(),
        draws,
        gaps,
        slopes,
    }
}

/// Rows of `x` moved so that row `p(i)` of the result is row `i` of `x`.
pub fn permute_rows(x: &Array2<f64>, p: impl Fn(usize) -> usize) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        out.row_mut(p(i)).assign(&row);
    }
    out
}

/// Erdős–Rényi multi-relational graph: each ordered pair and relation is an
/// edge with probability `p`. Self-loops are skipped.
pub fn random_graph(num_nodes: usize, num_relations: usize, p: f64, seed: u64) -> KnowledgeGraph {
    let mut rng = keyed_rng(seed, &[0xe7]);
    let mut ts = Vec::new();
    for k in 0..num_relations {
        for i in 0..num_nodes {
            for j in 0..num_nodes {
                if i != j && rng.gen::<f64>() < p {
                    ts.push(Triplet::new(i, k, j));
                }
            }
        }
    }
    KnowledgeGraph::new(ts, num_nodes, num_relations).expect("indices are in range")
}
