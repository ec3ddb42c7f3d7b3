//! Prediction-side analysis: ensembling, accuracy, passage-length
//! breakdowns, cross-task transfer, and an error digest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, Instance, TaskTag};
use crate::error::{Error, Result};
use crate::math::{argmax, mean_rows};
use crate::mcscorer::Prediction;
use crate::textprep::Tokenizer;

/// Average several systems' probability vectors per instance and pick
/// the argmax of the mean (ties to the lowest index). Output follows the
/// first member's instance order; members may order instances
/// differently but must cover the same ids.
pub fn ensemble(members: &[Vec<Prediction>]) -> Result<Vec<Prediction>> {
    if members.is_empty() {
        return Err(Error::InvalidParameter("ensemble of zero members".into()));
    }
    let mut by_id: Vec<BTreeMap<&str, &Prediction>> = Vec::with_capacity(members.len());
    for (m, preds) in members.iter().enumerate() {
        let mut map = BTreeMap::new();
        for pred in preds {
            if map.insert(pred.id.as_str(), pred).is_some() {
                return Err(Error::DuplicateId {
                    id: pred.id.clone(),
                });
            }
        }
        if m > 0 && (map.len() != by_id[0].len() || !map.keys().eq(by_id[0].keys())) {
            return Err(Error::Mismatch(format!(
                "ensemble member {m} covers different instance ids than member 0"
            )));
        }
        by_id.push(map);
    }

    let mut out = Vec::with_capacity(members[0].len());
    for first in &members[0] {
        let rows: Vec<Vec<f64>> = by_id
            .iter()
            .map(|map| map[first.id.as_str()].probs.clone())
            .collect();
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Mismatch(format!(
                "instance `{}`: members disagree on candidate count",
                first.id
            )));
        }
        let probs = mean_rows(&rows);
        let choice = argmax(&probs).expect("non-empty probabilities");
        out.push(Prediction {
            id: first.id.clone(),
            probs,
            choice,
        });
    }
    Ok(out)
}

fn gold_by_id(split: &DatasetSplit) -> Result<BTreeMap<&str, (usize, &Instance)>> {
    let mut map = BTreeMap::new();
    for inst in &split.instances {
        let gold = inst.gold_index.ok_or_else(|| Error::MissingGold {
            id: inst.id.clone(),
        })?;
        map.insert(inst.id.as_str(), (gold, inst));
    }
    Ok(map)
}

/// Fraction of split instances whose prediction matches gold. Every
/// instance must be predicted exactly once.
pub fn accuracy(predictions: &[Prediction], split: &DatasetSplit) -> Result<f64> {
    if split.instances.is_empty() {
        return Err(Error::EmptySplit);
    }
    let gold = gold_by_id(split)?;
    if predictions.len() != gold.len() {
        return Err(Error::Mismatch(format!(
            "{} predictions for {} instances",
            predictions.len(),
            gold.len()
        )));
    }
    let mut correct = 0usize;
    for pred in predictions {
        let &(gold_index, _) = gold.get(pred.id.as_str()).ok_or_else(|| {
            Error::Mismatch(format!("prediction for unknown instance `{}`", pred.id))
        })?;
        if pred.choice == gold_index {
            correct += 1;
        }
    }
    Ok(correct as f64 / predictions.len() as f64)
}

/// One passage-length bucket. `hi` of `None` means unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    pub hi: Option<usize>,
    pub total: usize,
    pub correct: usize,
    /// `None` when the bucket holds no instances — accuracy is
    /// undefined there, not zero.
    pub accuracy: Option<f64>,
}

/// Accuracy broken down by passage length in tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucketReport {
    pub buckets: Vec<LengthBucket>,
}

impl LengthBucketReport {
    /// CSV with one row per bucket, empty accuracy cell when undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket_lo,bucket_hi,total,correct,accuracy\n");
        for b in &self.buckets {
            let hi = b.hi.map(|h| h.to_string()).unwrap_or_default();
            let acc = b
                .accuracy
                .map(|a| format!("{a:.6}"))
                .unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", b.lo, hi, b.total, b.correct, acc));
        }
        out
    }
}

/// Bucket predictions by passage token count under `tokenizer`. `edges`
/// must be strictly increasing; they cut `[0, e0), [e0, e1), …,
/// [e_last, ∞)`.
pub fn length_buckets(
    predictions: &[Prediction],
    split: &DatasetSplit,
    tokenizer: &dyn Tokenizer,
    edges: &[usize],
) -> Result<LengthBucketReport> {
    if edges.is_empty() {
        return Err(Error::InvalidParameter("no bucket edges given".into()));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(format!(
            "bucket edges must be strictly increasing, got {edges:?}"
        )));
    }
    let gold = gold_by_id(split)?;
    let mut bounds: Vec<(usize, Option<usize>)> = Vec::with_capacity(edges.len() + 1);
    let mut lo = 0usize;
    for &edge in edges {
        bounds.push((lo, Some(edge)));
        lo = edge;
    }
    bounds.push((lo, None));

    let mut totals = vec![0usize; bounds.len()];
    let mut corrects = vec![0usize; bounds.len()];
    for pred in predictions {
        let &(gold_index, inst) = gold.get(pred.id.as_str()).ok_or_else(|| {
            Error::Mismatch(format!("prediction for unknown instance `{}`", pred.id))
        })?;
        let len = tokenizer.tokenize(&inst.passage).len();
        let bucket = bounds
            .iter()
            .position(|&(b_lo, b_hi)| len >= b_lo && b_hi.map_or(true, |h| len < h))
            .expect("buckets cover all lengths");
        totals[bucket] += 1;
        corrects[bucket] += usize::from(pred.choice == gold_index);
    }

    let buckets = bounds
        .into_iter()
        .zip(totals.iter().zip(&corrects))
        .map(|((lo, hi), (&total, &correct))| LengthBucket {
            lo,
            hi,
            total,
            correct,
            accuracy: (total > 0).then(|| correct as f64 / total as f64),
        })
        .collect();
    Ok(LengthBucketReport { buckets })
}

/// Accuracy of a model trained on one task when scored on another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source_task: TaskTag,
    pub target_task: TaskTag,
    pub count: usize,
    pub accuracy: f64,
}

/// Tag an accuracy measurement with its source and target tasks.
pub fn transfer_eval(
    source_task: TaskTag,
    predictions: &[Prediction],
    target_split: &DatasetSplit,
) -> Result<TransferReport> {
    let acc = accuracy(predictions, target_split)?;
    Ok(TransferReport {
        source_task,
        target_task: target_split.task_tag,
        count: predictions.len(),
        accuracy: acc,
    })
}

/// One misprediction, dressed for reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCase {
    pub id: String,
    pub confidence: f64,
    pub chosen_index: usize,
    pub chosen_text: String,
    pub gold_index: usize,
    pub gold_text: String,
    pub passage_excerpt: String,
    /// The augmentation token, when the instance carries one.
    pub nal_token: Option<String>,
}

const EXCERPT_WORDS: usize = 25;

fn excerpt(passage: &str) -> String {
    let words: Vec<&str> = passage.split_whitespace().collect();
    if words.len() <= EXCERPT_WORDS {
        words.join(" ")
    } else {
        format!("{} …", words[..EXCERPT_WORDS].join(" "))
    }
}

/// The wrong predictions, most confident first (ties by id), capped at
/// `limit` entries.
pub fn error_report(
    predictions: &[Prediction],
    split: &DatasetSplit,
    limit: usize,
) -> Result<Vec<ErrorCase>> {
    let gold = gold_by_id(split)?;
    let mut cases = Vec::new();
    for pred in predictions {
        let &(gold_index, inst) = gold.get(pred.id.as_str()).ok_or_else(|| {
            Error::Mismatch(format!("prediction for unknown instance `{}`", pred.id))
        })?;
        if pred.choice == gold_index {
            continue;
        }
        let chosen_text = inst
            .candidates
            .get(pred.choice)
            .cloned()
            .unwrap_or_default();
        let gold_text = inst.candidates.get(gold_index).cloned().unwrap_or_default();
        cases.push(ErrorCase {
            id: pred.id.clone(),
            confidence: pred.probs.get(pred.choice).copied().unwrap_or(f64::NAN),
            chosen_index: pred.choice,
            chosen_text,
            gold_index,
            gold_text,
            passage_excerpt: excerpt(&inst.passage),
            nal_token: inst.nal_meta.as_ref().map(|m| m.token.clone()),
        });
    }
    cases.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("finite confidence")
            .then_with(|| a.id.cmp(&b.id))
    });
    cases.truncate(limit);
    Ok(cases)
}
