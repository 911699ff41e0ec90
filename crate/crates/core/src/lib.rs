//! Hierarchical graph contrastive learning for recommendation.
//!
//! Pipeline: cross-layer contrastive pre-training on the user-item graph,
//! t-SNE projection and polar clustering of item embeddings, a user-cluster
//! graph built from the clusters, and joint fine-tuning on both graphs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod graph;
pub mod hierarchy;
pub mod losses;
pub mod matrix;
pub mod optim;
pub mod pipeline;
pub mod polar;
pub mod pretrain;
pub mod rng;
pub mod synthetic;
pub mod tsne;

pub use error::{HgclError, Result};
pub use matrix::Matrix;
