//! Link prediction on knowledge graphs whose test nodes and relations are
//! both unseen at training time.

pub mod checkpoint;
pub mod datasets;
pub mod deq;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod features;
pub mod graph;
pub mod io;
pub mod nn;
pub mod rng;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{KnowledgeGraph, PermutationPair, Triplet};
