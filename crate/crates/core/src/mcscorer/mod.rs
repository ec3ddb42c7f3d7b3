//! Candidate scoring, the smoothed objective, and prediction output.
//!
//! Each candidate is substituted into the question, paired with every
//! passage chunk, and encoded; the pooled vector goes through a dense
//! head to a scalar. Chunk scores are averaged per candidate, the means
//! softmax into a probability per candidate, and training minimizes
//! label-smoothed cross entropy against the gold candidate.

mod train;

pub use train::{
    load_model, save_model, train, EpochStats, TrainConfig, TrainReport,
};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, Instance};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::math::{argmax, softmax};
use crate::textprep::{build_inputs, EncodedInput, Tokenizer};

/// Probabilities below this are clamped inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense scoring head: pooled vector to scalar, `w · t + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ScoringHead {
    /// Seeded N(0, 0.02) weights, zero bias.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid stddev");
        Self {
            w: (0..dim).map(|_| normal.sample(&mut rng)).collect(),
            b: 0.0,
        }
    }

    pub fn score(&self, pooled: &[f64]) -> f64 {
        assert_eq!(pooled.len(), self.w.len(), "pooled width mismatch");
        self.b + self.w.iter().zip(pooled).map(|(w, p)| w * p).sum::<f64>()
    }
}

/// Per-candidate scores for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub instance_id: String,
    /// Chunk-averaged raw score per candidate.
    pub logits: Vec<f64>,
    /// Softmax of `logits` over every candidate slot.
    pub probs: Vec<f64>,
}

/// One output row: probabilities over the original candidates and the
/// chosen index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probs: Vec<f64>,
    pub choice: usize,
}

/// Smoothed target distribution: `1 - epsilon` on the gold index and
/// `epsilon / (count - 1)` elsewhere.
pub fn smooth_targets(gold: usize, count: usize, epsilon: f64) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(Error::InvalidParameter(format!(
            "label smoothing needs at least 2 candidates, got {count}"
        )));
    }
    if gold >= count {
        return Err(Error::InvalidParameter(format!(
            "gold index {gold} out of range for {count} candidates"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidParameter(format!(
            "smoothing epsilon must be in [0, 1), got {epsilon}"
        )));
    }
    let off = epsilon / (count - 1) as f64;
    let mut targets = vec![off; count];
    targets[gold] = 1.0 - epsilon;
    Ok(targets)
}

/// `-Σ targets[k] · ln(max(probs[k], 1e-12))`.
pub fn smoothed_cross_entropy(probs: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(probs.len(), targets.len(), "probs/targets length mismatch");
    -probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

// Chunk scores grouped per candidate, in candidate order.
fn group_by_candidate(inputs: &[EncodedInput], candidates: usize) -> Vec<Vec<&EncodedInput>> {
    let mut grouped: Vec<Vec<&EncodedInput>> = vec![Vec::new(); candidates];
    for input in inputs {
        grouped[input.candidate_index].push(input);
    }
    grouped
}

/// Score one instance: every candidate against every passage chunk,
/// chunk scores averaged, softmax over the averages.
pub fn score_instance(
    model: &dyn EncoderModel,
    head: &ScoringHead,
    tokenizer: &dyn Tokenizer,
    instance: &Instance,
    max_len: usize,
    stride: Option<usize>,
) -> Result<ScoreVector> {
    let inputs = build_inputs(instance, tokenizer, max_len, stride)?;
    let grouped = group_by_candidate(&inputs, instance.candidates.len());
    let mut logits = Vec::with_capacity(grouped.len());
    for chunk_inputs in &grouped {
        let mut total = 0.0;
        for input in chunk_inputs {
            let pooled = model.encode(&input.token_ids)?;
            total += head.score(&pooled.values);
        }
        logits.push(total / chunk_inputs.len() as f64);
    }
    Ok(ScoreVector {
        instance_id: instance.id.clone(),
        logits: logits.clone(),
        probs: softmax(&logits),
    })
}

/// Predict one instance. When the instance carries an augmentation slot,
/// that slot is excluded and the remaining scores renormalized, so the
/// choice always indexes an original candidate.
pub fn predict_instance(
    model: &dyn EncoderModel,
    head: &ScoringHead,
    tokenizer: &dyn Tokenizer,
    instance: &Instance,
    max_len: usize,
    stride: Option<usize>,
) -> Result<Prediction> {
    let scores = score_instance(model, head, tokenizer, instance, max_len, stride)?;
    let keep = instance.original_candidate_count();
    let probs = softmax(&scores.logits[..keep]);
    let choice = argmax(&probs).expect("at least one candidate");
    Ok(Prediction {
        id: instance.id.clone(),
        probs,
        choice,
    })
}

/// Predict a whole split in instance order.
pub fn predict_split(
    model: &dyn EncoderModel,
    head: &ScoringHead,
    tokenizer: &dyn Tokenizer,
    split: &DatasetSplit,
    max_len: usize,
    stride: Option<usize>,
) -> Result<Vec<Prediction>> {
    split
        .instances
        .iter()
        .map(|inst| predict_instance(model, head, tokenizer, inst, max_len, stride))
        .collect()
}

/// Write predictions as JSON lines `{"id", "probs", "choice"}`.
pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for pred in predictions {
        let line = serde_json::to_string(pred)
            .map_err(|e| Error::Training(format!("prediction serialization: {e}")))?;
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read predictions written by [`write_predictions`].
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pred: Prediction =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        out.push(pred);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::encoder::{PooledVector, VocabDistribution};

    /// Test encoder whose pooled output is a function of the input ids.
    pub struct ScriptedEncoder<F: Fn(&[u32]) -> Vec<f64>> {
        pub dim: usize,
        pub vocab: usize,
        pub f: F,
    }

    impl<F: Fn(&[u32]) -> Vec<f64>> EncoderModel for ScriptedEncoder<F> {
        fn model_id(&self) -> String {
            "scripted".into()
        }
        fn hidden_dim(&self) -> usize {
            self.dim
        }
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn max_input_len(&self) -> usize {
            usize::MAX
        }
        fn encode(&self, token_ids: &[u32]) -> Result<PooledVector> {
            Ok(PooledVector {
                values: (self.f)(token_ids),
            })
        }
        fn mlm_distribution(&self, _ids: &[u32], _pos: usize) -> Result<VocabDistribution> {
            Err(Error::InvalidParameter("scripted encoder has no LM head".into()))
        }
        fn token_embedding(&self, _id: u32) -> Result<Vec<f64>> {
            Err(Error::InvalidParameter("scripted encoder has no embeddings".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::ScriptedEncoder;
    use super::*;
    use crate::corpus::{Instance, NalMeta};
    use crate::textprep::WhitespaceTokenizer;
    use approx::assert_abs_diff_eq;

    #[test]
    fn smooth_targets_match_hand_computation() {
        let t = smooth_targets(3, 5, 0.1).unwrap();
        assert_eq!(t, vec![0.025, 0.025, 0.025, 0.9, 0.025]);
        assert_abs_diff_eq!(t.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        // epsilon 0 degenerates to one-hot
        assert_eq!(smooth_targets(1, 3, 0.0).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(smooth_targets(5, 5, 0.1).is_err());
        assert!(smooth_targets(0, 1, 0.1).is_err());
        assert!(smooth_targets(0, 3, 1.0).is_err());
    }

    #[test]
    fn uniform_one_hot_loss_is_ln_k() {
        let probs = vec![0.2; 5];
        let targets = smooth_targets(2, 5, 0.0).unwrap();
        assert_abs_diff_eq!(
            smoothed_cross_entropy(&probs, &targets),
            5.0_f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn loss_at_exact_smoothed_targets() {
        // probs == targets for K=5, epsilon=0.1 gives the target entropy.
        let targets = smooth_targets(0, 5, 0.1).unwrap();
        let loss = smoothed_cross_entropy(&targets, &targets);
        assert_abs_diff_eq!(loss, 0.4637124, epsilon = 1e-7);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let loss = smoothed_cross_entropy(&[0.0, 1.0], &[1.0, 0.0]);
        assert!(loss.is_finite());
        assert_abs_diff_eq!(loss, -(PROB_FLOOR.ln()), epsilon = 1e-9);
    }

    fn two_candidate_instance() -> (Instance, WhitespaceTokenizer) {
        let instance = Instance {
            id: "t0".into(),
            passage: "the fence was tall".into(),
            question: "the @placeholder jumped".into(),
            candidates: vec!["cat".into(), "dog".into()],
            gold_index: Some(0),
            nal_meta: None,
        };
        let tokenizer = WhitespaceTokenizer::from_texts([
            instance.passage.as_str(),
            "the jumped cat dog",
        ]);
        (instance, tokenizer)
    }

    #[test]
    fn scores_softmax_to_expected_probabilities() {
        let (instance, tokenizer) = two_candidate_instance();
        let cat = tokenizer.token_to_id("cat").unwrap();
        // Candidate "cat" scores ln 2, the other 0: probs (2/3, 1/3).
        let model = ScriptedEncoder {
            dim: 1,
            vocab: tokenizer.vocab_size(),
            f: move |ids: &[u32]| {
                if ids.contains(&cat) {
                    vec![2.0_f64.ln()]
                } else {
                    vec![0.0]
                }
            },
        };
        let head = ScoringHead {
            w: vec![1.0],
            b: 0.0,
        };
        let scores =
            score_instance(&model, &head, &tokenizer, &instance, 16, None).unwrap();
        assert_abs_diff_eq!(scores.probs[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scores.probs[1], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scores.logits[0], 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn chunk_scores_average_before_softmax() {
        // Two chunks; candidate A scores (1, 3), candidate B (3, 1).
        // Equal means, so the probabilities must tie at one half.
        let instance = Instance {
            id: "t1".into(),
            passage: "alpha alpha alpha alpha beta beta beta beta".into(),
            question: "pick @placeholder now".into(),
            candidates: vec!["aaa".into(), "bbb".into()],
            gold_index: Some(0),
            nal_meta: None,
        };
        let tokenizer = WhitespaceTokenizer::from_texts([
            "alpha beta pick now aaa bbb",
        ]);
        let alpha = tokenizer.token_to_id("alpha").unwrap();
        let aaa = tokenizer.token_to_id("aaa").unwrap();
        let model = ScriptedEncoder {
            dim: 1,
            vocab: tokenizer.vocab_size(),
            f: move |ids: &[u32]| {
                let first_chunk = ids.contains(&alpha);
                let cand_a = ids.contains(&aaa);
                vec![match (cand_a, first_chunk) {
                    (true, true) => 1.0,
                    (true, false) => 3.0,
                    (false, true) => 3.0,
                    (false, false) => 1.0,
                }]
            },
        };
        let head = ScoringHead {
            w: vec![1.0],
            b: 0.0,
        };
        // Q-A is 3 tokens, so prefix is 5 and a budget of 4 remains:
        // the 8-token passage splits into exactly two disjoint chunks.
        let scores =
            score_instance(&model, &head, &tokenizer, &instance, 10, Some(4)).unwrap();
        assert_abs_diff_eq!(scores.logits[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scores.logits[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scores.probs[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(scores.probs[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn augmented_slot_is_masked_out_of_predictions() {
        let tokenizer = WhitespaceTokenizer::from_texts(["x y z the slot one two three"]);
        let instance = Instance {
            id: "t2".into(),
            passage: "x y z".into(),
            question: "the @placeholder slot".into(),
            candidates: vec!["one".into(), "two".into(), "three".into()],
            gold_index: Some(0),
            nal_meta: Some(NalMeta {
                token: "three".into(),
                probability: 0.5,
                rank: 1,
                skipped: false,
                duplicate_of: None,
            }),
        };
        let three = tokenizer.token_to_id("three").unwrap();
        // The augmented candidate would dominate if it were kept.
        let model = ScriptedEncoder {
            dim: 1,
            vocab: tokenizer.vocab_size(),
            f: move |ids: &[u32]| {
                if ids.contains(&three) {
                    vec![100.0]
                } else {
                    vec![0.0]
                }
            },
        };
        let head = ScoringHead {
            w: vec![1.0],
            b: 0.0,
        };
        let pred =
            predict_instance(&model, &head, &tokenizer, &instance, 16, None).unwrap();
        assert_eq!(pred.probs.len(), 2);
        assert!(pred.choice < 2);
        assert_abs_diff_eq!(pred.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn predictions_round_trip_and_are_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.jsonl");
        let path_b = dir.path().join("b.jsonl");
        let preds = vec![
            Prediction {
                id: "0".into(),
                probs: vec![0.25, 0.5, 0.25],
                choice: 1,
            },
            Prediction {
                id: "1".into(),
                probs: vec![0.125, 0.125, 0.75],
                choice: 2,
            },
        ];
        write_predictions(&path_a, &preds).unwrap();
        write_predictions(&path_b, &preds).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap()
        );
        assert_eq!(read_predictions(&path_a).unwrap(), preds);
    }
}
