//! Metric-learning embeddings at desk scale: a small fully-convolutional
//! embedding network with MAC pooling, single/double-margin contrastive and
//! triplet objectives, two-stage (classification then retrieval) training,
//! and an exhaustive retrieval evaluation stack (mAP, rank-k, distance
//! distributions, margin suggestion, PCA post-processing).
//!
//! Everything is deterministic given a seed; all randomness flows through
//! [`numerics::RngState`].

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod sampling;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
