//! Dataset construction and on-disk bundles.

pub mod fd2;
pub mod sampling;
pub mod split;
pub mod uqer;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Triplet};
use crate::io::{read_triplets_with, write_triplets, NameMap, NameMaps};

pub use fd2::{generate_fd2, Fd2};
pub use sampling::{forest_fire_sample, sample_subgraph, topic_split, TopicGraph};
pub use split::{coverage_select, random_coverage_select};
pub use uqer::{
    fd2_clauses, format_clauses, parse_clauses, uqer_derive, uqer_derive_all, uqer_derive_with_budget, UqerClause,
};

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub parameters: BTreeMap<String, Value>,
    pub seed: u64,
}

/// Observed graph plus query splits. An empty `train` list means training
/// targets are masked out of `observed` on the fly.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub observed: KnowledgeGraph,
    pub train: Vec<Triplet>,
    pub valid: Vec<Triplet>,
    pub test: Vec<Triplet>,
    pub names: NameMaps,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    generator: String,
    parameters: BTreeMap<String, Value>,
    seed: u64,
    num_nodes: usize,
    num_relations: usize,
    counts: BTreeMap<String, usize>,
}

impl DatasetBundle {
    pub fn num_nodes(&self) -> usize {
        self.observed.num_nodes()
    }

    pub fn num_relations(&self) -> usize {
        self.observed.num_relations()
    }

    /// Observed triplets and every query split.
    pub fn known(&self) -> Vec<Triplet> {
        let mut all = self.observed.triplets().to_vec();
        all.extend(&self.train);
        all.extend(&self.valid);
        all.extend(&self.test);
        all
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<Triplet> = HashSet::new();
        let mut covered = vec![false; self.num_nodes()];
        for t in self.observed.triplets() {
            covered[t.head] = true;
            covered[t.tail] = true;
        }
        for (name, split) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for t in split {
                self.observed.check_triplet(t)?;
                if self.observed.contains(t) {
                    return Err(Error::Invalid(format!("{name} query {t} is observed")));
                }
                if !seen.insert(*t) {
                    return Err(Error::Invalid(format!("{name} query {t} appears in two splits")));
                }
                if name != "train" && !(covered[t.head] && covered[t.tail]) {
                    return Err(Error::Invalid(format!("{name} query {t} has an unobserved node")));
                }
            }
        }
        if self.names.nodes.len() != self.num_nodes() || self.names.relations.len() != self.num_relations() {
            return Err(Error::Invalid("name maps do not match the graph size".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_triplets(self.observed.triplets(), &self.names, &dir.join("observed.tsv"))?;
        write_triplets(&self.train, &self.names, &dir.join("train.tsv"))?;
        write_triplets(&self.valid, &self.names, &dir.join("valid.tsv"))?;
        write_triplets(&self.test, &self.names, &dir.join("test.tsv"))?;
        self.names.nodes.write(&dir.join("entities.txt"))?;
        self.names.relations.write(&dir.join("relations.txt"))?;
        let counts = [
            ("observed", self.observed.num_triplets()),
            ("train", self.train.len()),
            ("valid", self.valid.len()),
            ("test", self.test.len()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let meta = Meta {
            version: BUNDLE_VERSION,
            generator: self.provenance.generator.clone(),
            parameters: self.provenance.parameters.clone(),
            seed: self.provenance.seed,
            num_nodes: self.num_nodes(),
            num_relations: self.num_relations(),
            counts,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(dir.join("meta.json"))?;
        let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| Error::Schema(format!("meta.json: {e}")))?;
        if meta.version != BUNDLE_VERSION {
            return Err(Error::Schema(format!("unsupported bundle version {}", meta.version)));
        }
        let names = NameMaps {
            nodes: NameMap::read(&dir.join("entities.txt"))?,
            relations: NameMap::read(&dir.join("relations.txt"))?,
        };
        let read = |file: &str| -> Result<Vec<Triplet>> {
            let mut maps = names.clone();
            let ts = read_triplets_with(&dir.join(file), &mut maps)?;
            if maps != names {
                return Err(Error::Schema(format!("{file} uses names missing from the sidecars")));
            }
            Ok(ts)
        };
        let observed = KnowledgeGraph::new(read("observed.tsv")?, names.nodes.len(), names.relations.len().max(1))?;
        let bundle = Self {
            observed,
            train: read("train.tsv")?,
            valid: read("valid.tsv")?,
            test: read("test.tsv")?,
            provenance: Provenance {
                generator: meta.generator,
                parameters: meta.parameters,
                seed: meta.seed,
            },
            names,
        };
        if bundle.num_nodes() != meta.num_nodes || bundle.num_relations() != meta.num_relations {
            return Err(Error::Schema("meta.json sizes disagree with the sidecars".into()));
        }
        bundle.validate()?;
        Ok(bundle)
    }
}

fn floor_share(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 1e-9).floor() as usize
}

/// Random split with query nodes kept observed.
///
/// `ratios` is `(observed, valid, test)` or `(observed, test)`. Valid and test
/// sizes are rounded down; the observed part gets the remainder.
pub fn split_dataset(
    triplets: &[Triplet],
    num_nodes: usize,
    num_relations: usize,
    ratios: &[f64],
    seed: u64,
) -> Result<DatasetBundle> {
    if !(2..=3).contains(&ratios.len()) || ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::Invalid("ratios must be 2 or 3 fractions in [0, 1]".into()));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid("ratios must sum to 1".into()));
    }
    let mut unique = triplets.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let n = unique.len();
    let (n_valid, n_test) = if ratios.len() == 3 {
        (floor_share(n, ratios[1]), floor_share(n, ratios[2]))
    } else {
        (0, floor_share(n, ratios[1]))
    };
    let (queries, observed) = random_coverage_select(&unique, n_valid + n_test, num_nodes, seed)?;
    let mut valid = queries[..n_valid].to_vec();
    let mut test = queries[n_valid..].to_vec();
    valid.sort_unstable();
    test.sort_unstable();
    let observed = KnowledgeGraph::new(observed, num_nodes, num_relations)?;
    let mut parameters = BTreeMap::new();
    parameters.insert("ratios".to_string(), serde_json::json!(ratios));
    let bundle = DatasetBundle {
        observed,
        train: Vec::new(),
        valid,
        test,
        names: NameMaps::numbered(num_nodes, num_relations),
        provenance: Provenance {
            generator: "split".into(),
            parameters,
            seed,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}

fn prefixed_names(prefix: &str, num_nodes: usize, num_relations: usize) -> NameMaps {
    NameMaps {
        nodes: NameMap::numbered(&format!("{prefix}_e"), num_nodes),
        relations: NameMap::numbered(&format!("{prefix}_r"), num_relations),
    }
}

/// Training bundle from the tree benchmark; queries are split into train and
/// validation parts.
pub fn fd2_train_bundle(depths: &[u32], valid_fraction: f64, seed: u64) -> Result<DatasetBundle> {
    let f = generate_fd2(depths, true);
    let mut queries = f.queries.clone();
    queries.shuffle(&mut crate::rng::rng(seed));
    let n_valid = floor_share(queries.len(), valid_fraction);
    let mut valid = queries[..n_valid].to_vec();
    let mut train = queries[n_valid..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    fd2_bundle(f, train, valid, Vec::new(), "tr", depths, seed)
}

/// Evaluation bundle from the tree benchmark: every query is a test query.
pub fn fd2_test_bundle(depths: &[u32]) -> Result<DatasetBundle> {
    let f = generate_fd2(depths, true);
    let test = f.queries.clone();
    fd2_bundle(f, Vec::new(), Vec::new(), test, "te", depths, 0)
}

fn fd2_bundle(
    f: Fd2,
    train: Vec<Triplet>,
    valid: Vec<Triplet>,
    test: Vec<Triplet>,
    prefix: &str,
    depths: &[u32],
    seed: u64,
) -> Result<DatasetBundle> {
    let observed = KnowledgeGraph::new(f.observed, f.num_nodes, f.num_relations)?;
    let mut parameters = BTreeMap::new();
    parameters.insert("depths".to_string(), serde_json::json!(depths));
    let bundle = DatasetBundle {
        observed,
        train,
        valid,
        test,
        names: prefixed_names(prefix, f.num_nodes, f.num_relations),
        provenance: Provenance {
            generator: "fd2".into(),
            parameters,
            seed,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}
