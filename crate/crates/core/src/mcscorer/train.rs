//! Training loop: micro-batches of one instance, accumulated gradients,
//! AdamW updates, and best-on-dev checkpoint selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DatasetSplit;
use crate::encoder::{
    load_checkpoint, save_checkpoint, Checkpoint, ReferenceEncoder,
};
use crate::error::{Error, Result};
use crate::math::softmax;
use crate::optim::{AdamW, GradAccumulator};
use crate::textprep::{build_inputs, Tokenizer};

use super::{predict_split, smooth_targets, smoothed_cross_entropy, ScoringHead};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total input length budget, special tokens included.
    pub max_len: usize,
    /// Chunk stride; `None` means half the per-candidate passage budget.
    pub stride: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Micro-batches averaged into one optimizer step.
    pub accumulation: usize,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Small-model settings used by the built-in reference encoder.
    pub fn reference() -> Self {
        Self {
            max_len: 64,
            stride: None,
            epochs: 10,
            lr: 1e-3,
            weight_decay: 0.01,
            accumulation: 8,
            label_smoothing: 0.1,
            seed: 0,
        }
    }

    /// Settings tuned for a RoBERTa-large class encoder.
    pub fn roberta_large() -> Self {
        Self {
            max_len: 256,
            stride: None,
            epochs: 12,
            lr: 9e-6,
            weight_decay: 0.01,
            accumulation: 32,
            label_smoothing: 0.1,
            seed: 0,
        }
    }

    /// Settings tuned for an ALBERT-xxlarge class encoder.
    pub fn albert_xxlarge() -> Self {
        Self {
            max_len: 128,
            stride: None,
            epochs: 8,
            lr: 1e-5,
            weight_decay: 0.01,
            accumulation: 32,
            label_smoothing: 0.1,
            seed: 0,
        }
    }

    /// Settings tuned for a DeBERTa-large class encoder.
    pub fn deberta_large() -> Self {
        Self {
            max_len: 256,
            stride: None,
            epochs: 12,
            lr: 1e-5,
            weight_decay: 0.01,
            accumulation: 32,
            label_smoothing: 0.1,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.accumulation == 0 || self.max_len < 4 {
            return Err(Error::InvalidParameter(
                "epochs and accumulation must be positive, max_len at least 4".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidParameter(format!(
                "label smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidParameter(
                "learning rate must be positive, weight decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch record of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub dev_accuracy: f64,
}

/// What `train` returns: the full history plus which epoch's weights
/// were kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
}

// Encoder and head parameters travel as one flat vector so a single
// optimizer/accumulator covers both. Head weights sit after the encoder.
fn pack(encoder: &ReferenceEncoder, head: &ScoringHead) -> Vec<f64> {
    let mut flat = encoder.params().to_vec();
    flat.extend_from_slice(&head.w);
    flat.push(head.b);
    flat
}

fn unpack(flat: &[f64], encoder: &mut ReferenceEncoder, head: &mut ScoringHead) {
    let n = encoder.param_count();
    encoder.params_mut().copy_from_slice(&flat[..n]);
    let d = head.w.len();
    head.w.copy_from_slice(&flat[n..n + d]);
    head.b = flat[n + d];
}

/// One instance's loss and gradient (into `grads`, encoder params first,
/// then head weights and bias).
fn instance_loss_grad(
    encoder: &ReferenceEncoder,
    head: &ScoringHead,
    tokenizer: &dyn Tokenizer,
    instance: &crate::corpus::Instance,
    config: &TrainConfig,
    grads: &mut [f64],
) -> Result<f64> {
    let gold = instance.gold_index.ok_or_else(|| Error::MissingGold {
        id: instance.id.clone(),
    })?;
    let k = instance.candidates.len();
    let targets = smooth_targets(gold, k, config.label_smoothing)?;

    let inputs = build_inputs(instance, tokenizer, config.max_len, config.stride)?;
    let mut grouped: Vec<Vec<&crate::textprep::EncodedInput>> = vec![Vec::new(); k];
    for input in &inputs {
        grouped[input.candidate_index].push(input);
    }

    // Forward every chunk, keeping passes for the backward sweep.
    let mut passes = Vec::with_capacity(inputs.len());
    let mut logits = Vec::with_capacity(k);
    for chunk_inputs in &grouped {
        let mut total = 0.0;
        for input in chunk_inputs {
            let pass = encoder.forward(&input.token_ids)?;
            total += head.score(pass.pooled());
            passes.push(pass);
        }
        logits.push(total / chunk_inputs.len() as f64);
    }
    let probs = softmax(&logits);
    let loss = smoothed_cross_entropy(&probs, &targets);

    // d loss / d logit = p - y; spread over chunks through the mean.
    let enc_n = encoder.param_count();
    let d = head.w.len();
    let mut pass_iter = passes.iter();
    for (c, chunk_inputs) in grouped.iter().enumerate() {
        let d_score = (probs[c] - targets[c]) / chunk_inputs.len() as f64;
        for _ in chunk_inputs {
            let pass = pass_iter.next().expect("pass per input");
            let pooled = pass.pooled();
            for j in 0..d {
                grads[enc_n + j] += d_score * pooled[j];
            }
            grads[enc_n + d] += d_score;
            let mut d_final = vec![vec![0.0; d]; pass.len()];
            for j in 0..d {
                d_final[0][j] = d_score * head.w[j];
            }
            encoder.backward(pass, &d_final, &mut grads[..enc_n]);
        }
    }
    Ok(loss)
}

/// Train in place. Every epoch shuffles the training order with a seeded
/// generator, accumulates `accumulation` single-instance gradients per
/// AdamW step (mean reduction), evaluates on dev, and finally restores
/// the weights from the best dev epoch (earliest on ties).
pub fn train(
    encoder: &mut ReferenceEncoder,
    head: &mut ScoringHead,
    tokenizer: &dyn Tokenizer,
    train_split: &DatasetSplit,
    dev_split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_split.instances.is_empty() || dev_split.instances.is_empty() {
        return Err(Error::EmptySplit);
    }
    for inst in &dev_split.instances {
        if inst.gold_index.is_none() {
            return Err(Error::MissingGold {
                id: inst.id.clone(),
            });
        }
    }

    let total = encoder.param_count() + head.w.len() + 1;
    let mut optimizer = AdamW::new(config.lr, config.weight_decay, total);
    let mut accumulator = GradAccumulator::new(total);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<f64>)> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_split.instances.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        accumulator.reset();
        for &idx in &order {
            let mut grads = accumulator.scratch();
            loss_sum += instance_loss_grad(
                encoder,
                head,
                tokenizer,
                &train_split.instances[idx],
                config,
                &mut grads,
            )?;
            accumulator.add(&grads);
            if accumulator.count() == config.accumulation {
                let mut flat = pack(encoder, head);
                optimizer.step(&mut flat, &accumulator.mean())?;
                unpack(&flat, encoder, head);
                accumulator.reset();
            }
        }
        // Flush a trailing partial window so every instance counts.
        if !accumulator.is_empty() {
            let mut flat = pack(encoder, head);
            optimizer.step(&mut flat, &accumulator.mean())?;
            unpack(&flat, encoder, head);
            accumulator.reset();
        }

        let dev_accuracy = dev_accuracy(encoder, head, tokenizer, dev_split, config)?;
        history.push(EpochStats {
            epoch,
            mean_train_loss: loss_sum / train_split.instances.len() as f64,
            dev_accuracy,
        });
        let improved = best
            .as_ref()
            .map(|&(_, acc, _)| dev_accuracy > acc)
            .unwrap_or(true);
        if improved {
            best = Some((epoch, dev_accuracy, pack(encoder, head)));
        }
    }

    let (best_epoch, best_dev_accuracy, weights) = best.expect("at least one epoch");
    unpack(&weights, encoder, head);
    Ok(TrainReport {
        history,
        best_epoch,
        best_dev_accuracy,
    })
}

fn dev_accuracy(
    encoder: &ReferenceEncoder,
    head: &ScoringHead,
    tokenizer: &dyn Tokenizer,
    dev_split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<f64> {
    let preds = predict_split(
        encoder,
        head,
        tokenizer,
        dev_split,
        config.max_len,
        config.stride,
    )?;
    let correct = preds
        .iter()
        .zip(&dev_split.instances)
        .filter(|(p, inst)| Some(p.choice) == inst.gold_index)
        .count();
    Ok(correct as f64 / dev_split.instances.len() as f64)
}

const HEAD_W: &str = "head.weight";
const HEAD_B: &str = "head.bias";

/// Save encoder plus scoring head as one checkpoint.
pub fn save_model(
    path: &Path,
    encoder: &ReferenceEncoder,
    head: &ScoringHead,
    tokenizer_fingerprint: [u8; 32],
) -> Result<()> {
    let extras = vec![
        (HEAD_W.to_string(), vec![1, head.w.len()], head.w.clone()),
        (HEAD_B.to_string(), vec![1], vec![head.b]),
    ];
    let ckpt = Checkpoint::from_encoder(encoder, tokenizer_fingerprint, &extras);
    save_checkpoint(path, &ckpt)
}

/// Load a model saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<(ReferenceEncoder, ScoringHead, [u8; 32])> {
    let ckpt = load_checkpoint(path)?;
    let fingerprint = ckpt.tokenizer_fingerprint;
    let (encoder, extras) = ckpt.into_encoder()?;
    let find = |name: &str| {
        extras
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, data)| data.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    };
    let w = find(HEAD_W)?;
    let b = find(HEAD_B)?;
    if w.len() != encoder.config().dim || b.len() != 1 {
        return Err(Error::Checkpoint(
            "scoring head tensors have unexpected sizes".into(),
        ));
    }
    let head = ScoringHead { w, b: b[0] };
    Ok((encoder, head, fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Instance, SplitName, TaskTag};
    use crate::encoder::ReferenceEncoderConfig;
    use crate::textprep::WhitespaceTokenizer;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn word_instance(id: usize, gold_word: &str, other_word: &str) -> Instance {
        Instance {
            id: id.to_string(),
            passage: format!("{gold_word} {gold_word} {gold_word} {gold_word}"),
            question: "answer is @placeholder here".into(),
            candidates: vec![gold_word.to_string(), other_word.to_string()],
            gold_index: Some(0),
            nal_meta: None,
        }
    }

    fn toy_world() -> (DatasetSplit, WhitespaceTokenizer) {
        // Gold candidate always matches the repeated passage word.
        let words = ["red", "blue", "green", "gold"];
        let instances: Vec<Instance> = (0..8)
            .map(|i| {
                let gold = words[i % words.len()];
                let other = words[(i + 1) % words.len()];
                word_instance(i, gold, other)
            })
            .collect();
        let tokenizer = WhitespaceTokenizer::from_texts([
            "answer is here red blue green gold",
        ]);
        let split = DatasetSplit {
            name: SplitName::Train,
            task_tag: TaskTag::Synthetic,
            instances,
        };
        (split, tokenizer)
    }

    fn tiny_encoder(vocab: usize, seed: u64) -> ReferenceEncoder {
        ReferenceEncoder::new(ReferenceEncoderConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            ff_dim: 32,
            max_positions: 16,
            vocab_size: vocab,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn training_learns_a_separable_toy_task() {
        let (split, tokenizer) = toy_world();
        let mut encoder = tiny_encoder(tokenizer.vocab_size(), 5);
        let mut head = ScoringHead::new(16, 5);
        let config = TrainConfig {
            max_len: 16,
            stride: None,
            epochs: 60,
            lr: 1e-3,
            weight_decay: 0.0,
            accumulation: 4,
            label_smoothing: 0.0,
            seed: 11,
        };
        let report = train(&mut encoder, &mut head, &tokenizer, &split, &split, &config)
            .unwrap();
        assert_eq!(report.history.len(), 60);
        assert_abs_diff_eq!(report.best_dev_accuracy, 1.0);
        let first = report.history.first().unwrap().mean_train_loss;
        let last = report.history.last().unwrap().mean_train_loss;
        assert!(last < first, "loss should fall: {first} -> {last}");
        // Restored weights must reproduce the best dev accuracy.
        let acc = dev_accuracy(&encoder, &head, &tokenizer, &split, &config).unwrap();
        assert_abs_diff_eq!(acc, report.best_dev_accuracy);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (split, tokenizer) = toy_world();
        let run = || {
            let mut encoder = tiny_encoder(tokenizer.vocab_size(), 5);
            let mut head = ScoringHead::new(16, 5);
            let config = TrainConfig {
                max_len: 16,
                stride: None,
                epochs: 3,
                lr: 1e-3,
                weight_decay: 0.01,
                accumulation: 3,
                label_smoothing: 0.1,
                seed: 21,
            };
            train(&mut encoder, &mut head, &tokenizer, &split, &split, &config).unwrap();
            (encoder.params().to_vec(), head.clone())
        };
        let (pa, ha) = run();
        let (pb, hb) = run();
        assert_eq!(pa, pb);
        assert_eq!(ha, hb);
    }

    #[test]
    fn instance_gradient_matches_finite_differences() {
        let (split, tokenizer) = toy_world();
        let mut encoder = tiny_encoder(tokenizer.vocab_size(), 3);
        let head = ScoringHead::new(16, 3);
        let config = TrainConfig {
            max_len: 16,
            stride: None,
            epochs: 1,
            lr: 1e-3,
            weight_decay: 0.0,
            accumulation: 1,
            label_smoothing: 0.1,
            seed: 0,
        };
        let inst = &split.instances[0];
        let total = encoder.param_count() + 17;
        let mut grads = vec![0.0; total];
        instance_loss_grad(&encoder, &head, &tokenizer, inst, &config, &mut grads).unwrap();

        let h = 1e-5;
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        use rand::Rng;
        for _ in 0..12 {
            let i = rng.random_range(0..encoder.param_count());
            let mut scratch = vec![0.0; total];
            let orig = encoder.params()[i];
            encoder.params_mut()[i] = orig + h;
            let up =
                instance_loss_grad(&encoder, &head, &tokenizer, inst, &config, &mut scratch)
                    .unwrap();
            encoder.params_mut()[i] = orig - h;
            scratch.fill(0.0);
            let down =
                instance_loss_grad(&encoder, &head, &tokenizer, inst, &config, &mut scratch)
                    .unwrap();
            encoder.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((a - fd) / denom).abs() < 1e-4 || (a - fd).abs() < 1e-8,
                "param {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn model_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let encoder = tiny_encoder(10, 9);
        let head = ScoringHead::new(16, 9);
        save_model(&path, &encoder, &head, [3u8; 32]).unwrap();
        let (enc2, head2, fp) = load_model(&path).unwrap();
        assert_eq!(enc2.params(), encoder.params());
        assert_eq!(head2, head);
        assert_eq!(fp, [3u8; 32]);
    }

    #[test]
    fn train_rejects_missing_gold() {
        let (mut split, tokenizer) = toy_world();
        split.instances[3].gold_index = None;
        let mut encoder = tiny_encoder(tokenizer.vocab_size(), 5);
        let mut head = ScoringHead::new(16, 5);
        let config = TrainConfig {
            max_len: 16,
            stride: None,
            epochs: 1,
            lr: 1e-3,
            weight_decay: 0.0,
            accumulation: 2,
            label_smoothing: 0.0,
            seed: 0,
        };
        let err =
            train(&mut encoder, &mut head, &tokenizer, &split, &split, &config).unwrap_err();
        assert!(matches!(err, Error::MissingGold { .. }));
    }
}
