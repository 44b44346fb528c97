//! Merging independently trained dense transformer experts into Mixture-of-Experts models.
//!
//! The pipeline: train toy dense experts on synthetic domain corpora, compute task
//! vectors against a shared base, merge the non-FFN layers with averaging, Dare or
//! Ties, keep per-expert FFNs (and optionally attention) separate behind a top-K
//! router, and evaluate with either a learned router or fine-tuning-free routing
//! heuristics (reciprocal-perplexity and gradient/task-vector cosine). Experts with
//! different depths and widths merge through a padded shared embedding/head,
//! per-expert projectors and a sequence-level router.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod hetero;
pub mod merge;
pub mod model;
pub mod moe;
pub mod moef;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
