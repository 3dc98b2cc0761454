//! LightKG: a linear graph recommender over a collaborative knowledge graph.
//!
//! Relations are encoded as two learned scalars each (one per message
//! direction), propagation is a parameter-free weighted mean over neighbors,
//! and training combines BPR with a pairwise contrastive term that pushes
//! apart the layer-0 embeddings of nodes sharing few neighbors.
//!
//! Typical use goes through [`experiment`]: load a [`dataset::Corpus`],
//! [`experiment::prepare`] the split and graph, then [`experiment::run`].

pub mod checkpoint;
pub mod ckg;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod synthetic;
pub mod trainer;

pub use ckg::{CollaborativeKG, Direction, NodeId, NodeKind, NodeSpace, RelationId, Triplet};
pub use config::RunConfig;
pub use dataset::{Corpus, SplitDataset};
pub use error::{Error, Result};
pub use evaluator::{EvalReport, EvalSplit, Evaluator};
pub use matrix::Matrix;
pub use model::{ModelConfig, Parameters, RelationScalars};
pub use trainer::{train, TrainConfig, TrainLog, TrainOutcome};
