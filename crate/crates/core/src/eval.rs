//! Sampled-negative ranking evaluation, analytic random baselines and
//! report files.
//!
//! Each positive is ranked against a fixed number of corrupted triplets.
//! Ties are resolved in expectation: a positive tied with `t` candidates and
//! beaten by `b` of them contributes the average of each metric over ranks
//! `b+1 ..= b+t+1`, and its reported rank is the midpoint of that range.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TripletScorer;
use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Triplet};
use crate::rng::keyed_rng;

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_NEGATIVES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Node,
    Relation,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Self::Node),
            "relation" => Ok(Self::Relation),
            _ => Err(Error::Invalid(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptSide {
    Head,
    Tail,
}

/// How relation-task negatives are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationNegatives {
    /// `num_negatives` draws with replacement from the other relations.
    WithReplacement,
    /// Every other relation exactly once.
    AllOthers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub num_negatives: usize,
    pub corrupt: CorruptSide,
    pub relation_negatives: RelationNegatives,
    pub ks: Vec<usize>,
    /// Drop candidates that are themselves known triplets.
    pub filtered: bool,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            num_negatives: DEFAULT_NEGATIVES,
            corrupt: CorruptSide::Tail,
            relation_negatives: RelationNegatives::WithReplacement,
            ks: vec![1, 5, 10],
            filtered: false,
            seed: 0,
        }
    }
}

pub trait Scorer {
    fn score(&mut self, queries: &[Triplet]) -> Vec<f64>;
}

impl Scorer for TripletScorer<'_> {
    fn score(&mut self, queries: &[Triplet]) -> Vec<f64> {
        TripletScorer::score(self, queries)
    }
}

/// Adapts a closure to [`Scorer`].
pub struct FnScorer<F>(pub F);

impl<F: FnMut(&[Triplet]) -> Vec<f64>> Scorer for FnScorer<F> {
    fn score(&mut self, queries: &[Triplet]) -> Vec<f64> {
        (self.0)(queries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRank {
    pub query: Triplet,
    /// Candidates scored strictly above the positive.
    pub better: usize,
    /// Candidates scored equal to the positive.
    pub tied: usize,
    /// Negatives actually ranked against.
    pub negatives: usize,
}

impl QueryRank {
    pub fn mean_rank(&self) -> f64 {
        self.better as f64 + 1.0 + self.tied as f64 / 2.0
    }

    pub fn expected_hits(&self, k: usize) -> f64 {
        let lo = self.better + 1;
        let hi = self.better + self.tied + 1;
        if k < lo {
            0.0
        } else {
            (k.min(hi) - lo + 1) as f64 / (self.tied + 1) as f64
        }
    }

    pub fn expected_reciprocal_rank(&self) -> f64 {
        let lo = self.better + 1;
        let hi = self.better + self.tied + 1;
        (lo..=hi).map(|r| 1.0 / r as f64).sum::<f64>() / (self.tied + 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub task: Task,
    pub protocol: EvalProtocol,
    /// Smallest negative count actually used by any query.
    pub effective_negatives: usize,
    pub num_queries: usize,
    pub mrr: f64,
    pub mean_rank: f64,
    pub hits: BTreeMap<usize, f64>,
    pub ranks: Vec<QueryRank>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_ranks(task: Task, protocol: EvalProtocol, mut ranks: Vec<QueryRank>) -> Self {
        ranks.sort_by_key(|r| r.query);
        let n = ranks.len().max(1) as f64;
        let hits = protocol
            .ks
            .iter()
            .map(|&k| (k, ranks.iter().map(|r| r.expected_hits(k)).sum::<f64>() / n))
            .collect();
        Self {
            version: REPORT_VERSION,
            task,
            effective_negatives: ranks.iter().map(|r| r.negatives).min().unwrap_or(0),
            num_queries: ranks.len(),
            mrr: ranks.iter().map(QueryRank::expected_reciprocal_rank).sum::<f64>() / n,
            mean_rank: ranks.iter().map(QueryRank::mean_rank).sum::<f64>() / n,
            hits,
            ranks,
            protocol,
            metadata: BTreeMap::new(),
        }
    }

    pub fn hits_at(&self, k: usize) -> Option<f64> {
        self.hits.get(&k).copied()
    }
}

fn rank_of(scores: &[f64]) -> (usize, usize) {
    let pos = scores[0];
    let better = scores[1..].iter().filter(|&&s| s > pos).count();
    let tied = scores[1..].iter().filter(|&&s| s == pos).count();
    (better, tied)
}

/// Candidate negatives for one positive, keyed by the positive's content.
pub fn negatives_for(
    q: &Triplet,
    num_nodes: usize,
    num_relations: usize,
    task: Task,
    protocol: &EvalProtocol,
    is_known: &dyn Fn(&Triplet) -> bool,
) -> Vec<Triplet> {
    let mut rng = keyed_rng(protocol.seed, &[task as u64, q.content_key()]);
    match task {
        Task::Node => {
            let corrupt = |x: usize| match protocol.corrupt {
                CorruptSide::Tail => Triplet::new(q.head, q.relation, x),
                CorruptSide::Head => Triplet::new(x, q.relation, q.tail),
            };
            let truth = match protocol.corrupt {
                CorruptSide::Tail => q.tail,
                CorruptSide::Head => q.head,
            };
            let pool: Vec<usize> = (0..num_nodes)
                .filter(|&x| x != truth && !(protocol.filtered && is_known(&corrupt(x))))
                .collect();
            let take = protocol.num_negatives.min(pool.len());
            sample(&mut rng, pool.len(), take)
                .into_iter()
                .map(|idx| corrupt(pool[idx]))
                .collect()
        }
        Task::Relation => {
            let pool: Vec<usize> = (0..num_relations)
                .filter(|&k| {
                    let t = Triplet::new(q.head, k, q.tail);
                    k != q.relation && !(protocol.filtered && is_known(&t))
                })
                .collect();
            if pool.is_empty() {
                return Vec::new();
            }
            match protocol.relation_negatives {
                RelationNegatives::AllOthers => pool
                    .iter()
                    .map(|&k| Triplet::new(q.head, k, q.tail))
                    .collect(),
                RelationNegatives::WithReplacement => (0..protocol.num_negatives)
                    .map(|_| Triplet::new(q.head, pool[rng.gen_range(0..pool.len())], q.tail))
                    .collect(),
            }
        }
    }
}

/// Ranks each query against sampled negatives. `known` is only consulted in
/// filtered mode; `observed` fixes the candidate node and relation ranges.
pub fn evaluate(
    scorer: &mut dyn Scorer,
    observed: &KnowledgeGraph,
    queries: &[Triplet],
    known: &[Triplet],
    task: Task,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Invalid("no queries to evaluate".into()));
    }
    for q in queries {
        observed.check_triplet(q)?;
    }
    let known: HashSet<Triplet> = known
        .iter()
        .chain(observed.triplets())
        .chain(queries)
        .copied()
        .collect();
    let is_known = |t: &Triplet| known.contains(t);
    let mut ranks = Vec::with_capacity(queries.len());
    for q in queries {
        let negs = negatives_for(
            q,
            observed.num_nodes(),
            observed.num_relations(),
            task,
            protocol,
            &is_known,
        );
        let mut batch = Vec::with_capacity(negs.len() + 1);
        batch.push(*q);
        batch.extend(&negs);
        let scores = scorer.score(&batch);
        let (better, tied) = rank_of(&scores);
        ranks.push(QueryRank {
            query: *q,
            better,
            tied,
            negatives: negs.len(),
        });
    }
    Ok(EvalReport::from_ranks(task, protocol.clone(), ranks))
}

/// Harmonic number `H_n`.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub num_negatives: usize,
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
}

/// Expected metrics of a scorer that ranks the positive uniformly at random
/// among `num_negatives + 1` candidates.
pub fn random_baseline(num_negatives: usize, ks: &[usize]) -> Baseline {
    let c = num_negatives + 1;
    Baseline {
        num_negatives,
        mrr: harmonic(c) / c as f64,
        hits: ks.iter().map(|&k| (k, k.min(c) as f64 / c as f64)).collect(),
    }
}

pub fn report_write(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn report_read(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == REPORT_VERSION as u64 => {}
        Some(v) => return Err(Error::Schema(format!("unsupported report version {v}"))),
        None => return Err(Error::Schema("missing field `version`".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))
}

/// Union of the per-query ranks of reports on the same task and protocol,
/// with aggregates recomputed.
pub fn report_merge(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Invalid("nothing to merge".into()))?;
    let mut ranks = Vec::new();
    for r in reports {
        if r.task != first.task || r.protocol != first.protocol {
            return Err(Error::Invalid("reports use different tasks or protocols".into()));
        }
        ranks.extend(&r.ranks);
    }
    let mut merged = EvalReport::from_ranks(first.task, first.protocol.clone(), ranks);
    merged.metadata = first.metadata.clone();
    Ok(merged)
}
