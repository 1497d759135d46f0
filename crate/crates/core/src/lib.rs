//! Interpretable multi-step question answering over a document corpus.
//!
//! The pipeline narrows a corpus to a per-question candidate set with BM25
//! ([`retrieval`]), filters it with a cross-encoder ([`rerank`]), then runs a
//! fixed number of select → reformulate / entail steps ([`reasoner`]) that
//! leave a per-step trace of which document was read and which span mattered.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod entailment;
pub mod error;
pub mod harness;
pub mod neural;
pub mod reasoner;
pub mod reformulation;
pub mod rerank;
pub mod retrieval;
pub mod selection;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
