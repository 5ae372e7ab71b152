use std::path::PathBuf;

use crate::graph::Triplet;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("triplet {triplet} out of range for graph with {num_nodes} nodes and {num_relations} relations")]
    TripletOutOfRange {
        triplet: Triplet,
        num_nodes: usize,
        num_relations: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("permutation size mismatch: expected {expected}, got {actual}")]
    PermutationSize { expected: usize, actual: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("coverage infeasible: {needed} query triplets requested, {found} selectable; blocking nodes {blocking:?}")]
    Coverage {
        needed: usize,
        found: usize,
        blocking: Vec<usize>,
    },
    #[error("search budget of {budget} assignments exceeded; use a smaller graph or clause")]
    Budget { budget: u64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
