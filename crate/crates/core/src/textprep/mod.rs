//! Model-input construction: placeholder substitution, masking,
//! tokenization, and sliding-window chunking.
//!
//! The central product is [`EncodedInput`]: a `[CLS] Q-A [SEP] chunk [SEP]`
//! id sequence for one candidate and one passage chunk. Long passages are
//! split with an overlapping sliding window so every token survives in at
//! least one chunk.

mod bpe;
mod tokenizer;

pub use bpe::{BpeSpecials, BpeTokenizer};
pub use tokenizer::{
    load_tokenizer, save_tokenizer, Tokenizer, TokenizerFile, WhitespaceTokenizer,
};

use crate::corpus::{Instance, PLACEHOLDER};
use crate::error::{Error, Result};

/// Replace the single placeholder marker in `question` with `candidate`.
///
/// Errors when the marker is absent or repeated, or when the candidate is
/// the empty string.
pub fn substitute(question: &str, candidate: &str) -> Result<String> {
    if candidate.is_empty() {
        return Err(Error::EmptyCandidate);
    }
    let found = question.matches(PLACEHOLDER).count();
    if found != 1 {
        return Err(Error::Placeholder { found });
    }
    Ok(question.replacen(PLACEHOLDER, candidate, 1))
}

/// Replace the single placeholder marker with the tokenizer's MASK surface
/// form, leaving everything else unchanged.
pub fn mask_question(question: &str, tokenizer: &dyn Tokenizer) -> Result<String> {
    let found = question.matches(PLACEHOLDER).count();
    if found != 1 {
        return Err(Error::Placeholder { found });
    }
    Ok(question.replacen(PLACEHOLDER, tokenizer.mask_surface(), 1))
}

/// One window of a chunked passage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassageChunk {
    /// Offset of the first token within the full passage sequence.
    pub start: usize,
    pub token_ids: Vec<u32>,
}

/// Split `ids` into windows of at most `budget` tokens whose start offsets
/// advance by exactly `stride`. The final window may be shorter; every
/// token appears in at least one window. An empty passage yields a single
/// empty chunk so downstream input construction still emits one input per
/// candidate.
pub fn chunk_passage(ids: &[u32], budget: usize, stride: usize) -> Result<Vec<PassageChunk>> {
    if budget == 0 {
        return Err(Error::ChunkBudget { budget });
    }
    if stride == 0 || stride > budget {
        return Err(Error::ChunkStride { stride, budget });
    }
    if ids.len() <= budget {
        return Ok(vec![PassageChunk {
            start: 0,
            token_ids: ids.to_vec(),
        }]);
    }
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + budget).min(ids.len());
        chunks.push(PassageChunk {
            start,
            token_ids: ids[start..end].to_vec(),
        });
        if start + budget >= ids.len() {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

/// A tokenized `[CLS] Q-A [SEP] passage-chunk [SEP]` sequence for one
/// candidate and one chunk. Probe inputs additionally carry the index of
/// their MASK token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub token_ids: Vec<u32>,
    pub candidate_index: usize,
    pub chunk_index: usize,
    /// Set only for masked probe inputs; points at a MASK id.
    pub mask_position: Option<usize>,
    pub instance_id: String,
}

impl EncodedInput {
    /// Check the structural invariants: starts with CLS, contains exactly
    /// two SEP ids, fits the length budget, and any mask position points
    /// at a MASK id.
    pub fn check(&self, tokenizer: &dyn Tokenizer, max_len: usize) -> Result<()> {
        if self.token_ids.len() > max_len {
            return Err(Error::OversizeInput {
                len: self.token_ids.len(),
                max: max_len,
            });
        }
        if self.token_ids.first() != Some(&tokenizer.cls_id()) {
            return Err(Error::InvalidParameter("input does not start with CLS".into()));
        }
        let seps = self
            .token_ids
            .iter()
            .filter(|&&id| id == tokenizer.sep_id())
            .count();
        if seps != 2 {
            return Err(Error::InvalidParameter(format!(
                "input must contain exactly two SEP ids, found {seps}"
            )));
        }
        if let Some(pos) = self.mask_position {
            if self.token_ids.get(pos) != Some(&tokenizer.mask_id()) {
                return Err(Error::MaskPosition);
            }
        }
        Ok(())
    }
}

/// Build every `(candidate, chunk)` input for an instance.
///
/// The per-chunk passage budget is `max_len - |CLS Q-A SEP| - 1`, leaving
/// room for the terminal SEP; special tokens count against `max_len`. The
/// stride defaults to half the budget (50% window overlap) and is clamped
/// into `[1, budget]` when given. Outputs are ordered candidate-major,
/// then by chunk offset, and the Q-A prefix is identical across all chunks
/// of one candidate.
pub fn build_inputs(
    instance: &Instance,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
    stride: Option<usize>,
) -> Result<Vec<EncodedInput>> {
    let passage_ids = tokenizer.tokenize(&instance.passage);
    let mut inputs = Vec::new();
    for (candidate_index, candidate) in instance.candidates.iter().enumerate() {
        let qa = substitute(&instance.question, candidate)?;
        let qa_ids = tokenizer.tokenize(&qa);
        let prefix_len = qa_ids.len() + 2; // CLS + Q-A + SEP
        let budget = max_len
            .checked_sub(prefix_len + 1)
            .filter(|&b| b > 0)
            .ok_or(Error::OversizeQuestion {
                prefix: prefix_len,
                max_len,
            })?;
        let effective_stride = stride
            .map(|s| s.clamp(1, budget))
            .unwrap_or_else(|| (budget / 2).max(1));
        let chunks = chunk_passage(&passage_ids, budget, effective_stride)?;
        for (chunk_index, chunk) in chunks.iter().enumerate() {
            let mut token_ids = Vec::with_capacity(prefix_len + chunk.token_ids.len() + 1);
            token_ids.push(tokenizer.cls_id());
            token_ids.extend_from_slice(&qa_ids);
            token_ids.push(tokenizer.sep_id());
            token_ids.extend_from_slice(&chunk.token_ids);
            token_ids.push(tokenizer.sep_id());
            inputs.push(EncodedInput {
                token_ids,
                candidate_index,
                chunk_index,
                mask_position: None,
                instance_id: instance.id.clone(),
            });
        }
    }
    Ok(inputs)
}
