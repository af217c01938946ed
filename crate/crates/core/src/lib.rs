//! Training tiny decoder-only transformers under a depth-progressive
//! attention locality penalty, with semantic block partitioning, attention
//! metrics and a multi-seed statistics pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod locality;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod runner;
pub mod scalar;
pub mod segment;
pub mod stats;
pub mod toy;
pub mod train;

pub use corpus::{TokenId, TokenSequence};
pub use error::{Error, Result};
pub use model::{AttentionTensor, ModelConfig, ModelParams};
pub use partition::{BoundaryPolicy, Partition, PartitionMethod};
