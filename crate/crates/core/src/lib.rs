//! Fine-grained cross-modal alignment engine.
//!
//! Trains lightweight two-layer transformer heads on top of precomputed
//! image/text component embeddings, matches entity and relation components
//! across modalities with mean-over-max set similarity, and evaluates
//! retrieval and binary caption-choice tasks with weighted coarse+fine
//! scoring.

pub mod checkpoint;
pub mod components;
pub mod config;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod ingest;
pub mod matching;
pub mod numerics;
pub mod objective;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
