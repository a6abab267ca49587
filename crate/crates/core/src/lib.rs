//! Silent security patch detection.
//!
//! Patches are parsed and tokenized, augmented with a generated explanation
//! and a fixed label-wise instruction, embedded per modality, fused by an
//! attention stack into one vector per sample, and classified with a
//! logistic head trained on binary cross-entropy plus a batch triplet loss.

pub mod embed;
pub mod error;
pub mod eval;
pub mod explain;
pub mod fixtures;
pub mod ingest;
pub mod pipeline;
pub mod ptformer;
pub mod rng;
pub mod sbcl;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    default_hyperparams, EmbeddingMatrix, FusedEmbedding, HyperParams, Label, Modality,
    PatchSample, TokenSequence,
};
