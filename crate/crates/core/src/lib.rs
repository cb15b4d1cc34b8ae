//! Anatomy-aware vision/language alignment at desk scale.
//!
//! The crate covers the whole pipeline: a corpus data model with JSONL
//! ingestion, a seeded synthetic corpus generator, contrastive text/label
//! construction for per-region findings, a frozen hashed text embedder, box
//! geometry and the detection loss, a small transformer encoder with
//! anatomy query tokens and hand-derived gradients, the fine/global/total
//! alignment losses, a staged trainer, and the evaluation metrics used to
//! report per-attribute, per-group and per-region results.

#![allow(clippy::needless_range_loop)]
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod labelgen;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod textembed;
pub mod trainer;

pub use error::{Error, Result};
