//! Link masking, negative sampling, the cross-entropy objective and the
//! optimization loop.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{random_coverage_select, DatasetBundle};
use crate::encoder::{EncoderParams, TripletScorer};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalProtocol, Task};
use crate::features::DistanceCache;
use crate::graph::{KnowledgeGraph, PermutationPair, Triplet};
use crate::nn::{sigmoid, softplus, Adam, AdamConfig};
use crate::rng::{derive_seed, keyed_rng};

const MASK_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const NEGATIVE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub n_nd: usize,
    pub n_rl: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
    /// Redraws of a negative that hits a known triplet.
    pub max_retries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            n_nd: 2,
            n_rl: 2,
            mask_ratio: 0.1,
            seed: 0,
            patience: Some(3),
            max_retries: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if self.n_nd + self.n_rl == 0 {
            return bad("n_nd + n_rl must be at least 1");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must be in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Holds out `round(ratio · |triplets|)` triplets as targets while keeping
/// every target node incident to at least one observed triplet.
pub fn self_supervised_mask(g: &KnowledgeGraph, ratio: f64, seed: u64) -> Result<(KnowledgeGraph, Vec<Triplet>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid("mask ratio must be in (0, 1)".into()));
    }
    let count = (ratio * g.num_triplets() as f64).round() as usize;
    let (targets, rest) = random_coverage_select(g.triplets(), count, g.num_nodes(), seed)?;
    let observed = KnowledgeGraph::new(rest, g.num_nodes(), g.num_relations())?;
    Ok((observed, targets))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    /// Node corruptions first, then relation corruptions.
    pub triplets: Vec<Triplet>,
    /// Some draw ran out of retries and kept a known triplet.
    pub exhausted: bool,
}

pub trait NegativeSampler {
    /// `key` identifies the draw site (epoch, graph, position).
    fn sample(
        &self,
        positive: &Triplet,
        key: &[u64],
        num_nodes: usize,
        num_relations: usize,
        is_known: &dyn Fn(&Triplet) -> bool,
    ) -> NegativeSample;
}

/// Uniform head-or-tail and relation corruption with rejection of known
/// triplets. Every draw has its own random stream.
#[derive(Debug, Clone)]
pub struct UniformNegatives {
    pub n_nd: usize,
    pub n_rl: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl UniformNegatives {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            n_nd: c.n_nd,
            n_rl: c.n_rl,
            seed: derive_seed(c.seed, &[NEGATIVE_STREAM]),
            max_retries: c.max_retries,
        }
    }
}

impl NegativeSampler for UniformNegatives {
    fn sample(
        &self,
        positive: &Triplet,
        key: &[u64],
        num_nodes: usize,
        num_relations: usize,
        is_known: &dyn Fn(&Triplet) -> bool,
    ) -> NegativeSample {
        let mut triplets = Vec::with_capacity(self.n_nd + self.n_rl);
        let mut exhausted = false;
        for draw in 0..self.n_nd + self.n_rl {
            let mut keys = key.to_vec();
            keys.push(draw as u64);
            let mut rng = keyed_rng(self.seed, &keys);
            let mut candidate = *positive;
            for attempt in 0..=self.max_retries {
                candidate = if draw < self.n_nd {
                    let x = rng.gen_range(0..num_nodes);
                    if rng.gen_bool(0.5) {
                        Triplet::new(x, positive.relation, positive.tail)
                    } else {
                        Triplet::new(positive.head, positive.relation, x)
                    }
                } else {
                    Triplet::new(positive.head, rng.gen_range(0..num_relations), positive.tail)
                };
                if !is_known(&candidate) {
                    break;
                }
                if attempt == self.max_retries {
                    exhausted = true;
                }
            }
            triplets.push(candidate);
        }
        NegativeSample { triplets, exhausted }
    }
}

/// Runs an inner sampler in the frame of an unpermuted graph: a positive
/// of the permuted graph is mapped back, corrupted there, and the
/// corruptions are mapped forward again.
pub struct PermutedSampler<S> {
    inner: S,
    perm: PermutationPair,
    inverse: PermutationPair,
}

impl<S> PermutedSampler<S> {
    pub fn new(inner: S, perm: PermutationPair) -> Self {
        let inverse = perm.inverse();
        Self { inner, perm, inverse }
    }
}

impl<S: NegativeSampler> NegativeSampler for PermutedSampler<S> {
    fn sample(
        &self,
        positive: &Triplet,
        key: &[u64],
        num_nodes: usize,
        num_relations: usize,
        is_known: &dyn Fn(&Triplet) -> bool,
    ) -> NegativeSample {
        let original = self.inverse.apply_triplet(positive);
        let known = |t: &Triplet| is_known(&self.perm.apply_triplet(t));
        let s = self.inner.sample(&original, key, num_nodes, num_relations, &known);
        NegativeSample {
            triplets: s.triplets.iter().map(|t| self.perm.apply_triplet(t)).collect(),
            exhausted: s.exhausted,
        }
    }
}

/// Negatives for one positive of `g`, rejecting triplets present in `g`.
pub fn sample_negatives(g: &KnowledgeGraph, positive: &Triplet, n_nd: usize, n_rl: usize, seed: u64) -> NegativeSample {
    let sampler = UniformNegatives {
        n_nd,
        n_rl,
        seed,
        max_retries: TrainConfig::default().max_retries,
    };
    sampler.sample(positive, &[], g.num_nodes(), g.num_relations(), &|t| g.contains(t))
}

const LOG_EPS: f64 = 1e-12;

/// `−Σ_p [log s_p + mean_q log(1 − s_pq)]` over probability scores.
pub fn loss(pos_scores: &[f64], neg_scores: &[Vec<f64>]) -> Result<f64> {
    if pos_scores.len() != neg_scores.len() {
        return Err(Error::Invalid("one negative group per positive is required".into()));
    }
    let check = |s: f64| {
        if (0.0..=1.0).contains(&s) {
            Ok(s)
        } else {
            Err(Error::Invalid(format!("score {s} is outside [0, 1]")))
        }
    };
    let mut total = 0.0;
    for (&p, negs) in pos_scores.iter().zip(neg_scores) {
        total -= check(p)?.max(LOG_EPS).ln();
        if !negs.is_empty() {
            let mut acc = 0.0;
            for &q in negs {
                acc += (1.0 - check(q)?).max(LOG_EPS).ln();
            }
            total -= acc / negs.len() as f64;
        }
    }
    Ok(total)
}

/// Loss of one positive and its negatives on logits, with the gradient
/// with respect to each logit.
fn logit_loss(pos: f64, negs: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = negs.len().max(1) as f64;
    let mut value = softplus(-pos);
    let mut dnegs = Vec::with_capacity(negs.len());
    for &z in negs {
        value += softplus(z) / n;
        dnegs.push(sigmoid(z) / n);
    }
    (value, sigmoid(pos) - 1.0, dnegs)
}

/// Where the training targets of a graph come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSource {
    /// Fresh links are masked out of the graph every epoch.
    Masked,
    /// Fixed target triplets; the graph stays fully observed.
    Fixed(Vec<Triplet>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainGraph {
    pub graph: KnowledgeGraph,
    pub targets: TargetSource,
}

impl TrainGraph {
    pub fn masked(graph: KnowledgeGraph) -> Self {
        Self {
            graph,
            targets: TargetSource::Masked,
        }
    }

    pub fn fixed(graph: KnowledgeGraph, targets: Vec<Triplet>) -> Self {
        Self {
            graph,
            targets: TargetSource::Fixed(targets),
        }
    }

    /// Uses the bundle's train queries when present, masking otherwise.
    pub fn from_bundle(b: &DatasetBundle) -> Self {
        if b.train.is_empty() {
            Self::masked(b.observed.clone())
        } else {
            Self::fixed(b.observed.clone(), b.train.clone())
        }
    }
}

/// Held-out queries ranked after every epoch.
#[derive(Debug, Clone)]
pub struct Validation {
    pub observed: KnowledgeGraph,
    pub queries: Vec<Triplet>,
    pub known: Vec<Triplet>,
    pub protocol: EvalProtocol,
}

impl Validation {
    pub fn from_bundle(b: &DatasetBundle, protocol: EvalProtocol) -> Option<Self> {
        (!b.valid.is_empty()).then(|| Self {
            observed: b.observed.clone(),
            queries: b.valid.clone(),
            known: b.known(),
            protocol,
        })
    }

    /// `(relation MRR, node MRR)` on the held-out queries.
    pub fn scores(&self, params: &EncoderParams) -> Result<(f64, f64)> {
        let mut scorer = TripletScorer::new(params, &self.observed);
        let mut run = |task| {
            evaluate(&mut scorer, &self.observed, &self.queries, &self.known, task, &self.protocol)
                .map(|r| r.mrr)
        };
        Ok((run(Task::Relation)?, run(Task::Node)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub valid_relation_mrr: Option<f64>,
    pub valid_node_mrr: Option<f64>,
    pub seconds: f64,
    /// Negatives that kept a known triplet after exhausting retries.
    pub exhausted_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// One JSON record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub validation: Option<&'a Validation>,
    /// Defaults to [`UniformNegatives`] built from the config.
    pub sampler: Option<&'a dyn NegativeSampler>,
    /// Number of the first epoch, for resumed runs.
    pub start_epoch: usize,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Self-supervised training on one or more graphs with default options.
pub fn train(params: &EncoderParams, graphs: &[KnowledgeGraph], config: &TrainConfig) -> Result<(EncoderParams, TrainHistory)> {
    let sources: Vec<TrainGraph> = graphs.iter().cloned().map(TrainGraph::masked).collect();
    train_with(params, &sources, config, TrainOptions::default())
}

struct EpochGraph<'g> {
    observed: KnowledgeGraph,
    targets: Vec<Triplet>,
    known: HashSet<Triplet>,
    source: &'g TrainGraph,
}

/// Adam on the cross-entropy objective. Mini-batches of the different graphs
/// are interleaved round-robin. With validation, returns the parameters of
/// the best validation epoch.
pub fn train_with(
    params: &EncoderParams,
    sources: &[TrainGraph],
    config: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<(EncoderParams, TrainHistory)> {
    config.validate()?;
    if sources.is_empty() || sources.iter().any(|s| s.graph.is_empty()) {
        return Err(Error::Invalid("training needs at least one non-empty graph".into()));
    }
    let default_sampler = UniformNegatives::from_config(config);
    let sampler: &dyn NegativeSampler = options.sampler.unwrap_or(&default_sampler);
    let mut params = params.clone();
    let mut adam = Adam::new(config.adam());
    let mut history = TrainHistory {
        seed: config.seed,
        records: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    let mut best: Option<((f64, f64), EncoderParams)> = None;
    let mut since_best = 0;

    for epoch in options.start_epoch..options.start_epoch + config.epochs {
        let started = Instant::now();
        let mut epoch_graphs = Vec::with_capacity(sources.len());
        for (gi, src) in sources.iter().enumerate() {
            let (observed, targets) = match &src.targets {
                TargetSource::Fixed(t) => (src.graph.clone(), t.clone()),
                TargetSource::Masked => self_supervised_mask(
                    &src.graph,
                    config.mask_ratio,
                    derive_seed(config.seed, &[MASK_STREAM, epoch as u64, gi as u64]),
                )?,
            };
            let known = src.graph.triplets().iter().chain(&targets).copied().collect();
            epoch_graphs.push(EpochGraph {
                observed,
                targets,
                known,
                source: src,
            });
        }
        if epoch_graphs.iter().all(|e| e.targets.is_empty()) {
            return Err(Error::Invalid("no training targets; raise mask_ratio or add queries".into()));
        }
        let ops: Vec<_> = epoch_graphs.iter().map(|e| params.operator(&e.observed)).collect();
        let mut caches: Vec<DistanceCache> = epoch_graphs
            .iter()
            .map(|e| DistanceCache::new(&e.observed, params.config.distance_cap))
            .collect();
        let batches: Vec<Vec<Vec<usize>>> = epoch_graphs
            .iter()
            .enumerate()
            .map(|(gi, e)| {
                let mut order: Vec<usize> = (0..e.targets.len()).collect();
                order.shuffle(&mut keyed_rng(config.seed, &[SHUFFLE_STREAM, epoch as u64, gi as u64]));
                order.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let rounds = batches.iter().map(Vec::len).max().unwrap_or(0);

        let mut loss_sum = 0.0;
        let mut count = 0usize;
        let mut exhausted = 0usize;
        let mut batch_no = 0;
        for round in 0..rounds {
            for (gi, eg) in epoch_graphs.iter().enumerate() {
                let Some(batch) = batches[gi].get(round) else { continue };
                let n = eg.observed.num_nodes();
                let r = eg.source.graph.num_relations();
                let mut queries: Vec<Triplet> = batch.iter().map(|&i| eg.targets[i]).collect();
                let mut groups = Vec::with_capacity(batch.len());
                for &i in batch {
                    let s = sampler.sample(
                        &eg.targets[i],
                        &[epoch as u64, gi as u64, i as u64],
                        n,
                        r,
                        &|t| eg.known.contains(t),
                    );
                    exhausted += s.exhausted as usize;
                    groups.push(s.triplets.len());
                    queries.extend(s.triplets);
                }
                let dists = if params.config.use_distance {
                    caches[gi].features(&queries)
                } else {
                    Vec::new()
                };
                let b = batch.len() as f64;
                let (batch_loss, grad) = {
                    let fwd = params.forward_batch(&ops[gi], &queries, &dists);
                    let mut dlogits = vec![0.0; queries.len()];
                    let mut offset = batch.len();
                    let mut total = 0.0;
                    for (p, &g) in groups.iter().enumerate() {
                        let (v, dp, dn) = logit_loss(fwd.logits[p], &fwd.logits[offset..offset + g]);
                        total += v;
                        dlogits[p] = dp / b;
                        for (q, d) in dn.into_iter().enumerate() {
                            dlogits[offset + q] = d / b;
                        }
                        offset += g;
                    }
                    if !total.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            batch: batch_no,
                            param_norm: params.norm(),
                        });
                    }
                    (total, fwd.backward(&dlogits))
                };
                let grads: Vec<&[f64]> = grad.named_tensors().into_iter().map(|(_, _, v)| v).collect();
                adam.step(params.tensors_mut(), grads);
                loss_sum += batch_loss;
                count += batch.len();
                batch_no += 1;
            }
        }

        let valid = match options.validation {
            Some(v) => Some(v.scores(&params)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / count.max(1) as f64,
            valid_relation_mrr: valid.map(|v| v.0),
            valid_node_mrr: valid.map(|v| v.1),
            seconds: started.elapsed().as_secs_f64(),
            exhausted_negatives: exhausted,
        };
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(&record);
        }
        history.records.push(record);

        // Relation MRR decides; node MRR breaks ties.
        if let Some(key) = valid {
            if best.as_ref().is_none_or(|(b, _)| key > *b) {
                best = Some((key, params.clone()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    let out = best.map(|(_, p)| p).unwrap_or(params);
    Ok((out, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, EncoderConfig};

    #[test]
    fn loss_closed_forms() {
        let l = loss(&[0.5], &[vec![0.5]]).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(loss(&[1.0], &[vec![0.0, 0.0]]).unwrap().abs() < 1e-12);
        let oracle = -((0.9f64).ln() + ((0.8f64).ln() + (0.7f64).ln()) / 2.0)
            - ((0.8f64).ln() + ((0.9f64).ln() + (0.6f64).ln()) / 2.0);
        let l = loss(&[0.9, 0.8], &[vec![0.2, 0.3], vec![0.1, 0.4]]).unwrap();
        assert!((l - oracle).abs() < 1e-12);
        assert!(loss(&[1.5], &[vec![0.1]]).is_err());
    }

    #[test]
    fn logit_loss_agrees_with_probability_loss() {
        let (v, _, _) = logit_loss(0.3, &[-1.0, 2.0]);
        let l = loss(&[sigmoid(0.3)], &[vec![sigmoid(-1.0), sigmoid(2.0)]]).unwrap();
        assert!((v - l).abs() < 1e-12);
    }

    #[test]
    fn negatives_structure() {
        let g = KnowledgeGraph::new([Triplet::new(0, 0, 1)], 20, 3).unwrap();
        let p = Triplet::new(0, 0, 1);
        assert!(sample_negatives(&g, &p, 0, 0, 1).triplets.is_empty());
        let s = sample_negatives(&g, &p, 2, 2, 1);
        assert_eq!(s.triplets.len(), 4);
        for t in &s.triplets[..2] {
            assert_eq!(t.relation, 0);
            assert!((t.head == 0) ^ (t.tail == 1));
        }
        for t in &s.triplets[2..] {
            assert_eq!((t.head, t.tail), (0, 1));
            assert_ne!(t.relation, 0);
        }
        assert!(!s.exhausted);
    }

    #[test]
    fn complete_graph_exhausts_rejection() {
        let all = (0..3).flat_map(|h| (0..2).flat_map(move |r| (0..3).map(move |t| Triplet::new(h, r, t))));
        let g = KnowledgeGraph::new(all, 3, 2).unwrap();
        let s = sample_negatives(&g, &Triplet::new(0, 0, 1), 2, 2, 0);
        assert!(s.exhausted);
        assert_eq!(s.triplets.len(), 4);
    }

    #[test]
    fn star_mask_never_orphans_leaf() {
        let mut ts: Vec<Triplet> = (1..5).map(|l| Triplet::new(0, 0, l)).collect();
        ts.push(Triplet::new(1, 1, 2));
        let g = KnowledgeGraph::new(ts, 5, 2).unwrap();
        for seed in 0..40 {
            let (obs, targets) = self_supervised_mask(&g, 0.2, seed).unwrap();
            assert_eq!(targets.len(), 1);
            for t in &targets {
                assert!(t.head != 3 && t.head != 4 && t.tail != 3 && t.tail != 4);
                for x in [t.head, t.tail] {
                    assert!(obs.triplets().iter().any(|o| o.head == x || o.tail == x));
                }
            }
        }
        assert_eq!(self_supervised_mask(&g, 0.2, 7).unwrap(), self_supervised_mask(&g, 0.2, 7).unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let g = crate::datasets::fd2_train_bundle(&[3], 0.1, 0).unwrap();
        let p = init_encoder(&EncoderConfig {
            hidden_dim: 4,
            mlp_hidden_dims: vec![4],
            ..Default::default()
        })
        .unwrap();
        let c = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (out, h) = train_with(&p, &[TrainGraph::from_bundle(&g)], &c, TrainOptions::default()).unwrap();
        assert_eq!(out, p);
        assert_eq!(h.records.len(), 1);
        assert!(h.records[0].loss.is_finite());
    }
}
