//! Attention-based neural machine translation with per-source-word coverage
//! embeddings.
//!
//! Every source word carries a learned coverage vector, initialized "full"
//! from a coverage embedding table and driven toward zero as translation
//! proceeds, either by a dedicated GRU or by weighted subtraction of the
//! emitted word's embedding (or both in parallel). The coverage vectors feed
//! the attention layer, and optional penalty terms push the final vectors
//! toward zero, with or without supervised alignments.

pub mod attention;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod coverage;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod decoding;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
