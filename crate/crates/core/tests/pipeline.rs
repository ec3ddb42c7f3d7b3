//! Cross-module flows: data files in, augmented training, checkpoints,
//! and predictions out, all through the public API with the real
//! reference encoder.

use std::collections::BTreeMap;

use clozeqa::corpus::{load_jsonl, write_jsonl, DatasetSplit, Instance, SplitName, TaskTag};
use clozeqa::encoder::{ReferenceEncoder, ReferenceEncoderConfig};
use clozeqa::mcscorer::{
    load_model, predict_split, save_model, score_instance, train, ScoringHead, TrainConfig,
};
use clozeqa::probe::{augment_split, normalize_surface, zero_shot_rank, Similarity};
use clozeqa::tapt::{gen_in_domain_mlm, gen_within_task, train_mlm, MlmTrainConfig};
use clozeqa::textprep::{
    build_inputs, load_tokenizer, save_tokenizer, BpeSpecials, BpeTokenizer, Tokenizer,
    WhitespaceTokenizer,
};

const MAX_LEN: usize = 16;

/// Five-way instances whose gold word is the repeated passage word.
fn toy_split(name: SplitName, ids: &[&str]) -> DatasetSplit {
    let words = ["red", "blue", "green", "lime", "pink", "onyx", "teal", "gray"];
    let instances = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let gold = words[i % words.len()];
            let candidates: Vec<String> = (0..5)
                .map(|k| words[(i + k) % words.len()].to_string())
                .collect();
            Instance {
                id: (*id).to_string(),
                passage: format!("{gold} {gold} {gold} {gold} signal"),
                question: "the marker is @placeholder here".into(),
                candidates,
                gold_index: Some(0),
                nal_meta: None,
            }
        })
        .collect();
    DatasetSplit {
        name,
        task_tag: TaskTag::Synthetic,
        instances,
    }
}

fn toy_tokenizer(splits: &[&DatasetSplit]) -> WhitespaceTokenizer {
    let texts = splits.iter().flat_map(|split| {
        split.instances.iter().flat_map(|inst| {
            std::iter::once(inst.passage.as_str())
                .chain(std::iter::once(inst.question.as_str()))
                .chain(inst.candidates.iter().map(String::as_str))
        })
    });
    WhitespaceTokenizer::from_texts(texts)
}

fn tiny_encoder(vocab_size: usize, seed: u64) -> ReferenceEncoder {
    ReferenceEncoder::new(ReferenceEncoderConfig {
        layers: 1,
        heads: 2,
        dim: 16,
        ff_dim: 32,
        max_positions: MAX_LEN,
        vocab_size,
        seed,
    })
    .unwrap()
}

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_len: MAX_LEN,
        stride: None,
        epochs,
        lr: 1e-3,
        weight_decay: 0.01,
        accumulation: 4,
        label_smoothing: 0.1,
        seed: 5,
    }
}

#[test]
fn jsonl_round_trip_through_files() {
    let mut split = toy_split(SplitName::Train, &["a", "b", "c"]);
    split.instances[1].gold_index = None;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.jsonl");

    write_jsonl(&split, &path).unwrap();
    let reloaded = load_jsonl(&path, TaskTag::Synthetic, SplitName::Train).unwrap();
    assert_eq!(reloaded.instances, split.instances);

    // A second serialization is byte-identical to the first.
    let again = dir.path().join("again.jsonl");
    write_jsonl(&reloaded, &again).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn augment_train_predict_keeps_original_candidate_width() {
    let train_split = toy_split(SplitName::Train, &["t0", "t1", "t2", "t3", "t4", "t5"]);
    let dev_split = toy_split(SplitName::Dev, &["d0", "d1", "d2"]);
    let tokenizer = toy_tokenizer(&[&train_split, &dev_split]);
    let miner = tiny_encoder(tokenizer.vocab_size(), 3);

    let (augmented, stats) = augment_split(&miner, &tokenizer, &train_split).unwrap();
    assert_eq!(stats.total, 6);
    for (orig, aug) in train_split.instances.iter().zip(&augmented.instances) {
        assert_eq!(aug.candidates.len(), orig.candidates.len() + 1);
        assert_eq!(aug.gold_index, orig.gold_index);
        let meta = aug.nal_meta.as_ref().unwrap();
        assert_ne!(
            normalize_surface(&meta.token),
            normalize_surface(aug.gold_candidate().unwrap())
        );
    }

    let mut encoder = tiny_encoder(tokenizer.vocab_size(), 3);
    let mut head = ScoringHead::new(16, 3);
    let report = train(
        &mut encoder,
        &mut head,
        &tokenizer,
        &augmented,
        &dev_split,
        &tiny_train_config(2),
    )
    .unwrap();
    assert_eq!(report.history.len(), 2);
    assert!(report.history.iter().all(|e| e.mean_train_loss.is_finite()));

    // Predictions cover only the original five candidates even though the
    // model was trained on six.
    let predictions = predict_split(
        &encoder,
        &head,
        &tokenizer,
        &augmented,
        MAX_LEN,
        None,
    )
    .unwrap();
    for pred in &predictions {
        assert_eq!(pred.probs.len(), 5);
        let sum: f64 = pred.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(pred.choice < 5);
    }
}

#[test]
fn checkpoint_reload_reproduces_predictions_bitwise() {
    let train_split = toy_split(SplitName::Train, &["t0", "t1", "t2", "t3"]);
    let dev_split = toy_split(SplitName::Dev, &["d0", "d1"]);
    let tokenizer = toy_tokenizer(&[&train_split, &dev_split]);

    let mut encoder = tiny_encoder(tokenizer.vocab_size(), 11);
    let mut head = ScoringHead::new(16, 11);
    train(
        &mut encoder,
        &mut head,
        &tokenizer,
        &train_split,
        &dev_split,
        &tiny_train_config(1),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_model(&ckpt, &encoder, &head, tokenizer.fingerprint()).unwrap();
    let (loaded_encoder, loaded_head, fingerprint) = load_model(&ckpt).unwrap();
    assert_eq!(fingerprint, tokenizer.fingerprint());

    let before = predict_split(&encoder, &head, &tokenizer, &dev_split, MAX_LEN, None).unwrap();
    let after = predict_split(
        &loaded_encoder,
        &loaded_head,
        &tokenizer,
        &dev_split,
        MAX_LEN,
        None,
    )
    .unwrap();
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b.choice, a.choice);
        for (pb, pa) in b.probs.iter().zip(&a.probs) {
            assert_eq!(pb.to_bits(), pa.to_bits());
        }
    }
}

#[test]
fn tokenizer_artifact_round_trips_with_stable_fingerprint() {
    let split = toy_split(SplitName::Train, &["x"]);
    let tokenizer = toy_tokenizer(&[&split]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.json");

    save_tokenizer(&tokenizer, &path).unwrap();
    let loaded = load_tokenizer(&path).unwrap();
    assert_eq!(loaded.fingerprint(), tokenizer.fingerprint());
    assert_eq!(loaded.vocab_size(), tokenizer.vocab_size());
    assert_eq!(
        loaded.tokenize("the marker is red"),
        tokenizer.tokenize("the marker is red")
    );
}

#[test]
fn byte_bpe_tokenizer_drives_scoring_and_probing() {
    // Character-level byte BPE: every needed symbol is its own token, so
    // words split into characters and no merges are required.
    let mut vocab: BTreeMap<String, u32> = BTreeMap::new();
    for (i, ch) in "abcdeghiklmnorstuwy ".chars().enumerate() {
        let symbol = if ch == ' ' { '\u{120}'.to_string() } else { ch.to_string() };
        vocab.insert(symbol, i as u32);
    }
    let tokenizer = BpeTokenizer::from_parts(vocab, &[], BpeSpecials::default()).unwrap();

    let instance = Instance {
        id: "bpe0".into(),
        passage: "the cat sat on the warm stone".into(),
        question: "a @placeholder sat down".into(),
        candidates: vec!["cat".into(), "dog".into(), "sun".into()],
        gold_index: Some(0),
        nal_meta: None,
    };

    let max_len = 48;
    let inputs = build_inputs(&instance, &tokenizer, max_len, None).unwrap();
    assert_eq!(inputs.iter().map(|i| i.candidate_index).max(), Some(2));
    for input in &inputs {
        assert!(input.token_ids.len() <= max_len);
        assert_eq!(input.token_ids[0], tokenizer.cls_id());
    }

    let encoder = ReferenceEncoder::new(ReferenceEncoderConfig {
        layers: 1,
        heads: 2,
        dim: 16,
        ff_dim: 32,
        max_positions: max_len,
        vocab_size: tokenizer.vocab_size(),
        seed: 21,
    })
    .unwrap();
    let head = ScoringHead::new(16, 21);

    let scores = score_instance(&encoder, &head, &tokenizer, &instance, max_len, None).unwrap();
    let sum: f64 = scores.probs.iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);

    let ranked =
        zero_shot_rank(&encoder, &tokenizer, &instance, Similarity::MaskLikelihood).unwrap();
    assert_eq!(ranked.scores.len(), 3);
    let mut sorted = ranked.ranking.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![0, 1, 2]);
}

#[test]
fn adaptation_on_task_text_feeds_fine_tuning() {
    let train_split = toy_split(SplitName::Train, &["t0", "t1", "t2", "t3"]);
    let dev_split = toy_split(SplitName::Dev, &["d0", "d1"]);
    let tokenizer = toy_tokenizer(&[&train_split, &dev_split]);

    // Gold-filled sequences never contain the placeholder marker.
    let sequences = gen_within_task(&train_split, &tokenizer, MAX_LEN, None).unwrap();
    assert!(!sequences.is_empty());
    if let Some(marker) = tokenizer.token_to_id("@placeholder") {
        assert!(sequences.iter().all(|seq| !seq.contains(&marker)));
    }

    // Continue masked-LM pretraining on the passages, then fine-tune the
    // same weights on the task.
    let documents: Vec<String> = train_split
        .instances
        .iter()
        .map(|i| i.passage.clone())
        .collect();
    let examples = gen_in_domain_mlm(&documents, &tokenizer, MAX_LEN, 0.3, 17).unwrap();
    assert!(!examples.is_empty());

    let mut encoder = tiny_encoder(tokenizer.vocab_size(), 17);
    let mlm_report = train_mlm(
        &mut encoder,
        &examples,
        &MlmTrainConfig {
            epochs: 2,
            ..MlmTrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(mlm_report.epoch_losses.len(), 2);
    assert!(mlm_report.epoch_losses.iter().all(|l| l.is_finite()));

    let mut head = ScoringHead::new(16, 17);
    let report = train(
        &mut encoder,
        &mut head,
        &tokenizer,
        &train_split,
        &dev_split,
        &tiny_train_config(1),
    )
    .unwrap();
    assert!(report.best_dev_accuracy >= 0.0);
    assert!(report.history[0].mean_train_loss.is_finite());
}
