//! Relation detection for knowledge-base question answering.
//!
//! A question (with its topic entity replaced by `⟨e⟩`) is scored against
//! each candidate relation chain. Both sides are encoded into per-token
//! vectors, every question word attends over the relation tokens, the
//! question vectors and their attended relation summaries are compared
//! by a multi-kernel convolution with max-over-time pooling, and a linear
//! layer turns the pooled features into a score. Candidates are ranked
//! by score.
//!
//! The crate also carries the comparison variants (cosine
//! encoding-comparing, bi-directional attentive pooling, uniform
//! attention) and alternative context encoders (none, gated linear,
//! convolutional) behind the same [`model::ModelParams::score`] entry point.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod synth;
pub mod training;

pub use checkpoint::Checkpoint;
pub use config::{AttentionMode, EncodingPool, ModelConfig, Preprocessing, TrainConfig, Variant};
pub use error::{Error, Result};
