//! Encoder abstraction plus a self-contained reference transformer.
//!
//! The [`EncoderModel`] trait is the inference surface the rest of the
//! pipeline builds on: pooled sequence vectors for scoring, masked-LM
//! distributions for probing and augmentation, and raw token embeddings
//! for similarity lookups. [`ReferenceEncoder`] implements it with a
//! small pre-norm transformer written in plain `f64` so gradients can be
//! checked against finite differences; [`checkpoint`] gives it a stable
//! on-disk form.

mod checkpoint;
mod reference;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use reference::{
    ForwardPass, ReferenceEncoder, ReferenceEncoderConfig, TensorSpec, LN_EPS,
};

use crate::error::Result;

/// First-token ("CLS") hidden state of an encoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    pub values: Vec<f64>,
}

/// Masked-LM probability distribution over the vocabulary at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabDistribution {
    /// One probability per vocabulary id; sums to 1.
    pub probs: Vec<f64>,
    /// Instance the distribution was computed for; empty when the caller
    /// has not attached one.
    pub instance_id: String,
    /// Identifier of the producing model.
    pub model_id: String,
}

impl VocabDistribution {
    /// Ids sorted by descending probability; equal probabilities keep
    /// ascending id order.
    pub fn ranked_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..self.probs.len() as u32).collect();
        ids.sort_by(|&a, &b| {
            self.probs[b as usize]
                .partial_cmp(&self.probs[a as usize])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
        ids
    }
}

/// Inference-side contract every encoder backend satisfies.
pub trait EncoderModel {
    /// Stable human-readable identifier (architecture + seed).
    fn model_id(&self) -> String;
    /// Width of pooled vectors and token embeddings.
    fn hidden_dim(&self) -> usize;
    /// Number of token ids the model accepts.
    fn vocab_size(&self) -> usize;
    /// Longest input sequence the model can position-embed.
    fn max_input_len(&self) -> usize;
    /// Encode a sequence and pool its first position.
    fn encode(&self, token_ids: &[u32]) -> Result<PooledVector>;
    /// Vocabulary distribution predicted at `mask_position`.
    fn mlm_distribution(&self, token_ids: &[u32], mask_position: usize)
        -> Result<VocabDistribution>;
    /// Static embedding row for one token id.
    fn token_embedding(&self, token_id: u32) -> Result<Vec<f64>>;
}
