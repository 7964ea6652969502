//! Group-robust classifier training, online clustering, and utterance
//! mining for imbalanced corpora.
//!
//! The pipeline: generate or load a labeled corpus ([`corpus`]), train a
//! pooled classifier under ERM, group-balanced, or group-DRO objectives
//! ([`trainer`] over the [`encoder`] model), evaluate per-group fairness
//! ([`metrics`]), cluster encoder embeddings with online k-means
//! ([`cluster`]), and mine targeted utterance subsets for augmentation
//! ([`miner`]). Every stage is deterministic given its explicit seed.

pub mod cli;
pub mod cluster;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod miner;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
