//! Byte-level tokenization, corpora, and batch sampling.

mod sampler;
pub mod synth;
mod tokenizer;

pub use sampler::{eval_windows, sample_batch, Batch};
pub use tokenizer::{detokenize, token_display, tokenize_bytes, EOT_ID, PAD_ID, VOCAB_SIZE};

use std::path::Path;

use crate::error::{Error, Result};

/// Token stream with a train/validation split at `split`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<u32>,
    split: usize,
}

impl Corpus {
    /// Tokenizes `bytes`; the last `val_fraction` of tokens is validation.
    pub fn from_bytes(bytes: &[u8], val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {val_fraction}")));
        }
        let tokens = tokenize_bytes(bytes);
        let val = (tokens.len() as f64 * val_fraction).floor() as usize;
        Ok(Corpus { split: tokens.len() - val, tokens })
    }

    pub fn from_file(path: &Path, val_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, val_fraction)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn train(&self) -> &[u32] {
        &self.tokens[..self.split]
    }

    pub fn validation(&self) -> &[u32] {
        &self.tokens[self.split..]
    }

    pub fn split(&self) -> usize {
        self.split
    }
}
