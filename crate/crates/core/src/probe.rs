//! Zero-shot probing of an encoder's masked-LM head, and negative
//! augmentation: appending the language model's own best wrong guess to
//! an instance's candidate list as an extra distractor.

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, Instance, NalMeta};
use crate::encoder::{EncoderModel, VocabDistribution};
use crate::error::{Error, Result};
use crate::math::cosine;
use crate::textprep::{chunk_passage, mask_question, Tokenizer};

/// How zero-shot candidate scores are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    /// Probability the masked-LM assigns the candidate's first token.
    MaskLikelihood,
    /// Cosine between the top predicted token's embedding and the mean
    /// embedding of the candidate's tokens.
    EmbeddingCosine,
}

impl std::str::FromStr for Similarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask-likelihood" => Ok(Self::MaskLikelihood),
            "embedding-cosine" => Ok(Self::EmbeddingCosine),
            other => Err(Error::InvalidParameter(format!(
                "unknown similarity `{other}` (expected mask-likelihood or embedding-cosine)"
            ))),
        }
    }
}

/// Candidates ordered by zero-shot preference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub instance_id: String,
    /// One score per candidate, higher is better.
    pub scores: Vec<f64>,
    /// Candidate indices sorted by descending score; ties keep the
    /// lower index first.
    pub ranking: Vec<usize>,
}

impl RankedCandidates {
    pub fn choice(&self) -> usize {
        self.ranking[0]
    }
}

/// One masked-LM negative with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeCandidate {
    /// Cleaned surface form (word-piece space markers stripped).
    pub token: String,
    pub token_id: u32,
    pub probability: f64,
    /// 1-based rank in the vocabulary distribution.
    pub rank: usize,
    /// True when a higher-ranked prediction was the gold answer and had
    /// to be passed over.
    pub skipped_gold: bool,
}

/// `[CLS] masked-question [SEP] first-passage-chunk [SEP]` plus the index
/// of the mask token in that sequence.
pub fn build_probe_input(
    instance: &Instance,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<(Vec<u32>, usize)> {
    let masked = mask_question(&instance.question, tokenizer)?;
    let q_ids = tokenizer.tokenize(&masked);
    let mask_in_q = q_ids
        .iter()
        .position(|&id| id == tokenizer.mask_id())
        .ok_or(Error::MaskPosition)?;
    let prefix_len = q_ids.len() + 2;
    if max_len < prefix_len + 2 {
        return Err(Error::OversizeQuestion {
            prefix: prefix_len,
            max_len,
        });
    }
    let budget = max_len - prefix_len - 1;
    let passage_ids = tokenizer.tokenize(&instance.passage);
    let stride = (budget / 2).max(1);
    let chunks = chunk_passage(&passage_ids, budget, stride)?;
    let first = &chunks[0];

    let mut ids = Vec::with_capacity(prefix_len + first.token_ids.len() + 1);
    ids.push(tokenizer.cls_id());
    ids.extend_from_slice(&q_ids);
    ids.push(tokenizer.sep_id());
    ids.extend_from_slice(&first.token_ids);
    ids.push(tokenizer.sep_id());
    Ok((ids, 1 + mask_in_q))
}

// Highest probability over the candidate's first token, tried both bare
// and with a leading space so word-piece vocabularies behave.
fn candidate_likelihood(
    dist: &VocabDistribution,
    tokenizer: &dyn Tokenizer,
    candidate: &str,
) -> Result<f64> {
    let mut best: Option<f64> = None;
    for text in [candidate.to_string(), format!(" {candidate}")] {
        if let Some(&first) = tokenizer.tokenize(&text).first() {
            let p = dist.probs[first as usize];
            best = Some(best.map_or(p, |b: f64| b.max(p)));
        }
    }
    best.ok_or(Error::EmptyCandidate)
}

fn ranking_of(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order
}

/// Rank an instance's candidates without any training.
pub fn zero_shot_rank(
    model: &dyn EncoderModel,
    tokenizer: &dyn Tokenizer,
    instance: &Instance,
    similarity: Similarity,
) -> Result<RankedCandidates> {
    let (ids, mask_position) = build_probe_input(instance, tokenizer, model.max_input_len())?;
    let mut dist = model.mlm_distribution(&ids, mask_position)?;
    dist.instance_id = instance.id.clone();

    let scores = match similarity {
        Similarity::MaskLikelihood => instance
            .candidates
            .iter()
            .map(|cand| candidate_likelihood(&dist, tokenizer, cand))
            .collect::<Result<Vec<f64>>>()?,
        Similarity::EmbeddingCosine => {
            let top = top_nonspecial_id(&dist, tokenizer)?;
            let top_emb = model.token_embedding(top)?;
            instance
                .candidates
                .iter()
                .map(|cand| {
                    let ids = tokenizer.tokenize(cand);
                    if ids.is_empty() {
                        return Err(Error::EmptyCandidate);
                    }
                    let mut mean = vec![0.0; model.hidden_dim()];
                    for &id in &ids {
                        for (m, e) in mean.iter_mut().zip(model.token_embedding(id)?) {
                            *m += e;
                        }
                    }
                    let inv = 1.0 / ids.len() as f64;
                    mean.iter_mut().for_each(|m| *m *= inv);
                    Ok(cosine(&top_emb, &mean))
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };

    Ok(RankedCandidates {
        instance_id: instance.id.clone(),
        ranking: ranking_of(&scores),
        scores,
    })
}

/// Fraction of instances whose top-ranked candidate is gold.
pub fn zero_shot_accuracy(
    model: &dyn EncoderModel,
    tokenizer: &dyn Tokenizer,
    split: &DatasetSplit,
    similarity: Similarity,
) -> Result<f64> {
    if split.instances.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut correct = 0usize;
    for instance in &split.instances {
        let gold = instance.gold_index.ok_or_else(|| Error::MissingGold {
            id: instance.id.clone(),
        })?;
        let ranked = zero_shot_rank(model, tokenizer, instance, similarity)?;
        if ranked.choice() == gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.instances.len() as f64)
}

fn top_nonspecial_id(dist: &VocabDistribution, tokenizer: &dyn Tokenizer) -> Result<u32> {
    dist.ranked_ids()
        .into_iter()
        .find(|&id| !tokenizer.is_special(id))
        .ok_or_else(|| Error::NotEnoughNegatives {
            requested: 1,
            eligible: 0,
        })
}

/// Strip word-piece space markers and casing so surfaces compare the way
/// a reader would compare them.
pub fn normalize_surface(surface: &str) -> String {
    surface
        .trim_start_matches('\u{120}') // byte-level BPE space marker Ġ
        .trim()
        .to_lowercase()
}

/// The language model's `k` most probable wrong answers for the masked
/// question: special tokens and anything matching the gold answer are
/// passed over (and the pass-over recorded).
pub fn top_negatives(
    model: &dyn EncoderModel,
    tokenizer: &dyn Tokenizer,
    instance: &Instance,
    k: usize,
) -> Result<Vec<NegativeCandidate>> {
    if k == 0 {
        return Err(Error::InvalidParameter(
            "requested zero negatives".into(),
        ));
    }
    let gold = instance.gold_candidate().ok_or_else(|| Error::MissingGold {
        id: instance.id.clone(),
    })?;
    let gold_norm = normalize_surface(gold);

    let (ids, mask_position) = build_probe_input(instance, tokenizer, model.max_input_len())?;
    let dist = model.mlm_distribution(&ids, mask_position)?;

    let mut negatives = Vec::with_capacity(k);
    let mut skipped_gold = false;
    for (rank0, id) in dist.ranked_ids().into_iter().enumerate() {
        if tokenizer.is_special(id) {
            continue;
        }
        let surface = tokenizer
            .id_to_token(id)
            .ok_or(Error::VocabId {
                id,
                vocab: dist.probs.len(),
            })?;
        let token = normalize_surface(&surface);
        if token.is_empty() {
            continue;
        }
        if token == gold_norm {
            skipped_gold = true;
            continue;
        }
        negatives.push(NegativeCandidate {
            token,
            token_id: id,
            probability: dist.probs[id as usize],
            rank: rank0 + 1,
            skipped_gold,
        });
        if negatives.len() == k {
            return Ok(negatives);
        }
    }
    Err(Error::NotEnoughNegatives {
        requested: k,
        eligible: negatives.len(),
    })
}

/// Append the top wrong prediction as one extra candidate, recording how
/// it was chosen. A negative that collides with an existing distractor is
/// kept but flagged through `duplicate_of`.
pub fn augment_instance(
    model: &dyn EncoderModel,
    tokenizer: &dyn Tokenizer,
    instance: &Instance,
) -> Result<Instance> {
    if instance.nal_meta.is_some() {
        return Err(Error::InvalidParameter(format!(
            "instance `{}` is already augmented",
            instance.id
        )));
    }
    let negative = top_negatives(model, tokenizer, instance, 1)?.remove(0);
    let duplicate_of = instance
        .candidates
        .iter()
        .position(|cand| normalize_surface(cand) == negative.token);
    let mut augmented = instance.clone();
    augmented.candidates.push(negative.token.clone());
    augmented.nal_meta = Some(NalMeta {
        token: negative.token,
        probability: negative.probability,
        rank: negative.rank,
        skipped: negative.skipped_gold,
        duplicate_of,
    });
    Ok(augmented)
}

/// Tallies from augmenting a split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentStats {
    pub total: usize,
    /// Instances where the gold answer outranked the chosen negative.
    pub gold_skipped: usize,
    /// Instances whose negative duplicates an existing distractor.
    pub duplicates: usize,
}

/// Augment every instance of a split.
pub fn augment_split(
    model: &dyn EncoderModel,
    tokenizer: &dyn Tokenizer,
    split: &DatasetSplit,
) -> Result<(DatasetSplit, AugmentStats)> {
    let mut stats = AugmentStats::default();
    let mut instances = Vec::with_capacity(split.instances.len());
    for instance in &split.instances {
        let augmented = augment_instance(model, tokenizer, instance)?;
        let meta = augmented.nal_meta.as_ref().expect("augmented");
        stats.total += 1;
        stats.gold_skipped += usize::from(meta.skipped);
        stats.duplicates += usize::from(meta.duplicate_of.is_some());
        instances.push(augmented);
    }
    Ok((
        DatasetSplit {
            name: split.name,
            task_tag: split.task_tag,
            instances,
        },
        stats,
    ))
}
