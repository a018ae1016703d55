//! Lexicon-enhanced named-entity recognition for low-resource domains.
//!
//! The crate trains a BiLSTM-CRF sequence tagger whose token inputs are
//! augmented with frequency-weighted dictionary-match vectors, and
//! co-trains character-level language models as an auxiliary objective.
//! Everything is pure Rust over `ndarray`, deterministic under a seed,
//! and exercised end to end by the `acceptance` integration suite.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod lexicon;
pub mod nn;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
