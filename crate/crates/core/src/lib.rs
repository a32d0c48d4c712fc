//! Dual-encoder conversational response retrieval.
//!
//! A shared subword transformer encodes inputs and responses; side-specific
//! projection heads map them onto the unit sphere where cosine similarity
//! ranks candidate responses.

pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod intent;
pub mod multi_context;
pub mod numeric;
pub mod model;
pub mod objective;
pub mod params;
pub mod quant;
pub mod serialize;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use config::{Ablation, ModelConfig};
pub use error::{Error, Result};
pub use tokenizer::{SubwordVocab, TokenSequence, VocabLimits};
