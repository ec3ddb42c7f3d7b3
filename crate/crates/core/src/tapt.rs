//! Task-adaptive pretraining data: within-task sequences built from gold
//! answers, masked-LM examples over in-domain documents, and
//! next-sentence pairs. Plus a small masked-LM training loop that reuses
//! the encoder's analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, Instance};
use crate::encoder::ReferenceEncoder;
use crate::error::{Error, Result};
use crate::optim::{AdamW, GradAccumulator};
use crate::textprep::{build_inputs, Tokenizer};

/// One masked-LM training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmExample {
    /// Token ids with mask tokens already substituted.
    pub input_ids: Vec<u32>,
    /// `(position, original id)` for every masked position, ascending.
    pub targets: Vec<(usize, u32)>,
}

/// A next-sentence-prediction pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub first: String,
    pub second: String,
    pub is_next: bool,
}

/// Generated pairs plus a degenerate-corpus marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NspData {
    pub pairs: Vec<SentencePair>,
    /// True when fewer than two documents had sentences, so no negative
    /// pairs could be drawn and every pair is a true continuation.
    pub all_true: bool,
}

/// Sequences pairing each question (gold answer substituted) with every
/// chunk of its passage — the shape the scorer will see at fine-tuning
/// time.
pub fn gen_within_task(
    split: &DatasetSplit,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
    stride: Option<usize>,
) -> Result<Vec<Vec<u32>>> {
    let mut sequences = Vec::new();
    for instance in &split.instances {
        let gold = instance.gold_candidate().ok_or_else(|| Error::MissingGold {
            id: instance.id.clone(),
        })?;
        // Reduce to the gold candidate so only gold sequences come out.
        let gold_only = Instance {
            candidates: vec![gold.to_string()],
            gold_index: Some(0),
            nal_meta: None,
            ..instance.clone()
        };
        for input in build_inputs(&gold_only, tokenizer, max_len, stride)? {
            sequences.push(input.token_ids);
        }
    }
    Ok(sequences)
}

/// Masked-LM examples over raw documents. Each document is tokenized,
/// truncated to `max_len`, and `round(mask_rate · len)` distinct
/// positions are masked with a generator seeded per document, so example
/// `i` never depends on the documents before it. Documents too short to
/// mask even one position are dropped.
pub fn gen_in_domain_mlm(
    documents: &[String],
    tokenizer: &dyn Tokenizer,
    max_len: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<Vec<MlmExample>> {
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::InvalidParameter(format!(
            "mask rate must be in [0, 1], got {mask_rate}"
        )));
    }
    if max_len == 0 {
        return Err(Error::InvalidParameter("max_len must be positive".into()));
    }
    let mut examples = Vec::new();
    for (doc_index, doc) in documents.iter().enumerate() {
        let mut ids = tokenizer.tokenize(doc);
        ids.truncate(max_len);
        let count = (mask_rate * ids.len() as f64).round() as usize;
        if count == 0 {
            continue;
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(doc_index as u64));
        let mut positions: Vec<usize> =
            rand::seq::index::sample(&mut rng, ids.len(), count).into_vec();
        positions.sort_unstable();
        let targets: Vec<(usize, u32)> =
            positions.iter().map(|&pos| (pos, ids[pos])).collect();
        for &pos in &positions {
            ids[pos] = tokenizer.mask_id();
        }
        examples.push(MlmExample {
            input_ids: ids,
            targets,
        });
    }
    Ok(examples)
}

fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        current.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            let trimmed = current.trim();
            if !trimmed.is_empty() {
                sentences.push(trimmed.to_string());
            }
            current.clear();
        }
    }
    let tail = current.trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

/// Next-sentence pairs: every consecutive sentence pair within a document
/// becomes a true pair, and each true pair is matched by a false pair
/// whose second sentence is drawn (seeded) from a different document —
/// an exact 50/50 balance. With fewer than two documents the false side
/// is impossible; the result is flagged `all_true` instead of failing.
pub fn gen_nsp_pairs(documents: &[String], seed: u64) -> Result<NspData> {
    let sentences_per_doc: Vec<Vec<String>> =
        documents.iter().map(|d| split_sentences(d)).collect();
    let pool: Vec<(usize, &String)> = sentences_per_doc
        .iter()
        .enumerate()
        .flat_map(|(d, sents)| sents.iter().map(move |s| (d, s)))
        .collect();
    let docs_with_sentences = sentences_per_doc.iter().filter(|s| !s.is_empty()).count();
    let can_negate = docs_with_sentences >= 2;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (doc_index, sents) in sentences_per_doc.iter().enumerate() {
        for window in sents.windows(2) {
            pairs.push(SentencePair {
                first: window[0].clone(),
                second: window[1].clone(),
                is_next: true,
            });
            if can_negate {
                let second = loop {
                    let (d, s) = pool[rng.random_range(0..pool.len())];
                    if d != doc_index {
                        break s.clone();
                    }
                };
                pairs.push(SentencePair {
                    first: window[0].clone(),
                    second,
                    is_next: false,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptySplit);
    }
    Ok(NspData {
        pairs,
        all_true: !can_negate,
    })
}

/// Masked-LM training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub accumulation: usize,
    pub seed: u64,
}

impl Default for MlmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            weight_decay: 0.01,
            accumulation: 8,
            seed: 0,
        }
    }
}

/// Mean masked-token loss per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    pub epoch_losses: Vec<f64>,
}

/// Continue pretraining the encoder's masked-LM head on `examples`,
/// micro-batch one with mean-reduced gradient accumulation.
pub fn train_mlm(
    encoder: &mut ReferenceEncoder,
    examples: &[MlmExample],
    config: &MlmTrainConfig,
) -> Result<MlmReport> {
    if examples.is_empty() {
        return Err(Error::EmptySplit);
    }
    if config.epochs == 0 || config.accumulation == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidParameter(
            "epochs, accumulation and learning rate must be positive".into(),
        ));
    }
    let mut optimizer = AdamW::new(config.lr, config.weight_decay, encoder.param_count());
    let mut accumulator = GradAccumulator::new(encoder.param_count());
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        accumulator.reset();
        for &idx in &order {
            let example = &examples[idx];
            let mut grads = accumulator.scratch();
            loss_sum +=
                encoder.mlm_step_loss(&example.input_ids, &example.targets, &mut grads)?;
            accumulator.add(&grads);
            if accumulator.count() == config.accumulation {
                optimizer.step(encoder.params_mut(), &accumulator.mean())?;
                accumulator.reset();
            }
        }
        if !accumulator.is_empty() {
            optimizer.step(encoder.params_mut(), &accumulator.mean())?;
            accumulator.reset();
        }
        epoch_losses.push(loss_sum / examples.len() as f64);
    }
    Ok(MlmReport { epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SplitName, TaskTag};
    use crate::encoder::ReferenceEncoderConfig;
    use crate::textprep::WhitespaceTokenizer;

    fn split_with(instances: Vec<Instance>) -> DatasetSplit {
        DatasetSplit {
            name: SplitName::Train,
            task_tag: TaskTag::Synthetic,
            instances,
        }
    }

    #[test]
    fn within_task_uses_only_gold_answers() {
        let tokenizer =
            WhitespaceTokenizer::from_texts(["park trees the cat dog sat there today"]);
        let inst = Instance {
            id: "0".into(),
            passage: "park trees".into(),
            question: "the @placeholder sat there".into(),
            candidates: vec!["dog".into(), "cat".into()],
            gold_index: Some(1),
            nal_meta: None,
        };
        let seqs = gen_within_task(&split_with(vec![inst.clone()]), &tokenizer, 16, None)
            .unwrap();
        assert_eq!(seqs.len(), 1);
        let cat = tokenizer.token_to_id("cat").unwrap();
        let dog = tokenizer.token_to_id("dog").unwrap();
        assert!(seqs[0].contains(&cat));
        assert!(!seqs[0].contains(&dog));

        let mut no_gold = inst;
        no_gold.gold_index = None;
        assert!(matches!(
            gen_within_task(&split_with(vec![no_gold]), &tokenizer, 16, None),
            Err(Error::MissingGold { .. })
        ));
    }

    #[test]
    fn within_task_emits_every_chunk() {
        let tokenizer =
            WhitespaceTokenizer::from_texts(["a b c d e f g h q @placeholder x y"]);
        let inst = Instance {
            id: "0".into(),
            passage: "a b c d e f g h".into(),
            question: "q @placeholder".into(),
            candidates: vec!["x".into()],
            gold_index: Some(0),
            nal_meta: None,
        };
        // prefix 4, budget 10 - 4 - 1 = 5, stride 2: starts 0, 2, 4.
        let seqs = gen_within_task(&split_with(vec![inst]), &tokenizer, 10, Some(2)).unwrap();
        assert_eq!(seqs.len(), 3);
    }

    #[test]
    fn mlm_masking_is_counted_and_reversible() {
        let tokenizer = WhitespaceTokenizer::from_texts([
            "w0 w1 w2 w3 w4 w5 w6 w7 w8 w9 w10 w11 w12 w13 w14 w15 w16 w17 w18 w19",
        ]);
        let doc =
            "w0 w1 w2 w3 w4 w5 w6 w7 w8 w9 w10 w11 w12 w13 w14 w15 w16 w17 w18 w19"
                .to_string();
        let original = tokenizer.tokenize(&doc);
        let examples =
            gen_in_domain_mlm(&[doc.clone()], &tokenizer, 64, 0.15, 3).unwrap();
        assert_eq!(examples.len(), 1);
        let ex = &examples[0];
        // round(0.15 * 20) = 3 masked positions.
        assert_eq!(ex.targets.len(), 3);
        for &(pos, orig) in &ex.targets {
            assert_eq!(ex.input_ids[pos], tokenizer.mask_id());
            assert_eq!(orig, original[pos]);
        }
        // Unmasked positions are untouched.
        let masked: Vec<usize> = ex.targets.iter().map(|&(p, _)| p).collect();
        for (pos, (&got, &want)) in ex.input_ids.iter().zip(&original).enumerate() {
            if !masked.contains(&pos) {
                assert_eq!(got, want);
            }
        }
        // Same seed reproduces; a different seed moves the masks.
        let again = gen_in_domain_mlm(&[doc.clone()], &tokenizer, 64, 0.15, 3).unwrap();
        assert_eq!(examples, again);
        let moved = gen_in_domain_mlm(&[doc], &tokenizer, 64, 0.15, 4).unwrap();
        assert_ne!(examples, moved);
    }

    #[test]
    fn mlm_rounding_and_short_docs() {
        let tokenizer = WhitespaceTokenizer::from_texts(["a b c d e f g h i j"]);
        // 10 tokens at 0.15 rounds to 2.
        let ex = gen_in_domain_mlm(
            &["a b c d e f g h i j".into()],
            &tokenizer,
            64,
            0.15,
            0,
        )
        .unwrap();
        assert_eq!(ex[0].targets.len(), 2);
        // 3 tokens at 0.15 rounds to 0: dropped.
        let none = gen_in_domain_mlm(&["a b c".into()], &tokenizer, 64, 0.15, 0).unwrap();
        assert!(none.is_empty());
        // Truncation applies before counting.
        let truncated =
            gen_in_domain_mlm(&["a b c d e f g h i j".into()], &tokenizer, 7, 0.3, 0)
                .unwrap();
        assert_eq!(truncated[0].input_ids.len(), 7);
        assert_eq!(truncated[0].targets.len(), 2);
    }

    #[test]
    fn nsp_pairs_balance_and_cross_document_negatives() {
        let docs = vec![
            "First one. Second one. Third one.".to_string(),
            "Other alpha. Other beta.".to_string(),
        ];
        let data = gen_nsp_pairs(&docs, 5).unwrap();
        assert!(!data.all_true);
        let trues: Vec<_> = data.pairs.iter().filter(|p| p.is_next).collect();
        let falses: Vec<_> = data.pairs.iter().filter(|p| !p.is_next).collect();
        // 2 consecutive pairs in doc 0 + 1 in doc 1, each mirrored.
        assert_eq!(trues.len(), 3);
        assert_eq!(falses.len(), 3);
        for pair in &falses {
            let first_doc = usize::from(pair.first.starts_with("Other"));
            let second_doc = usize::from(pair.second.starts_with("Other"));
            assert_ne!(first_doc, second_doc, "negative must cross documents");
        }
        // Deterministic under the same seed.
        assert_eq!(gen_nsp_pairs(&docs, 5).unwrap(), data);
    }

    #[test]
    fn nsp_single_document_is_flagged_all_true() {
        let docs = vec!["One here. Two here. Three here.".to_string()];
        let data = gen_nsp_pairs(&docs, 0).unwrap();
        assert!(data.all_true);
        assert!(data.pairs.iter().all(|p| p.is_next));
        assert_eq!(data.pairs.len(), 2);
    }

    #[test]
    fn mlm_training_reduces_loss() {
        let tokenizer = WhitespaceTokenizer::from_texts([
            "the cat sat on the mat the dog ran in the park",
        ]);
        let docs: Vec<String> = vec![
            "the cat sat on the mat".into(),
            "the dog ran in the park".into(),
            "the cat ran on the park".into(),
        ];
        let examples = gen_in_domain_mlm(&docs, &tokenizer, 16, 0.3, 1).unwrap();
        let mut encoder = ReferenceEncoder::new(ReferenceEncoderConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            ff_dim: 32,
            max_positions: 16,
            vocab_size: tokenizer.vocab_size(),
            seed: 2,
        })
        .unwrap();
        let report = train_mlm(
            &mut encoder,
            &examples,
            &MlmTrainConfig {
                epochs: 15,
                lr: 1e-3,
                weight_decay: 0.0,
                accumulation: 3,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(report.epoch_losses.len(), 15);
        assert!(
            report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap(),
            "loss should fall: {:?}",
            report.epoch_losses
        );
    }
}
