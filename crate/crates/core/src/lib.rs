//! BERT-style encoder language model fine-tuned into a speech recognizer by
//! summing per-word acoustic embeddings into its input representation.

pub mod acoustic;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod text;
pub mod training;

pub use error::{Error, Result};
