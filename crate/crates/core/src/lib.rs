//! Cloze-style multiple-choice reading comprehension pipeline.
//!
//! The library covers the full lifecycle of a cloze MRC system over
//! abstract-word candidates:
//!
//! - [`corpus`] — ingest and validate JSON-Lines datasets of
//!   `<passage, question, candidates, gold>` instances.
//! - [`textprep`] — placeholder substitution, masking, tokenization
//!   (whitespace reference tokenizer and a byte-level BPE loader), and
//!   sliding-window chunking of long passages.
//! - [`encoder`] — the encoder contract (CLS pooling + MLM head) and a
//!   small trainable transformer reference encoder with exact gradients.
//! - [`probe`] — zero-shot masked-LM probing of candidates and mining of
//!   negative candidates for augmentation (NAL).
//! - [`mcscorer`] — candidate scoring, label-smoothed cross entropy, and
//!   the gradient-accumulated fine-tuning loop.
//! - [`tapt`] — task-adaptive pretraining data generators (within-task
//!   filled sequences, in-domain MLM, sentence pairs) and MLM training.
//! - [`eval`] — prediction ensembling, accuracy, passage-length bucket
//!   analysis, transfer evaluation, and error-case reports.
//!
//! All randomness is seeded and every pipeline stage is deterministic:
//! the same inputs, config, and seed produce byte-identical artifacts.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod math;
pub mod mcscorer;
pub mod optim;
pub mod probe;
pub mod tapt;
pub mod textprep;

pub use error::{Error, Result};
