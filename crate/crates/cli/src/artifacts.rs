//! Shared artifact handling: datasets, tokenizers, and model checkpoints.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clozeqa::corpus::{load_jsonl, DatasetSplit, SplitName, TaskTag};
use clozeqa::encoder::ReferenceEncoder;
use clozeqa::mcscorer::{load_model, ScoringHead};
use clozeqa::textprep::{load_tokenizer, Tokenizer, WhitespaceTokenizer};

use crate::config::PipelineConfig;

/// Load one JSON-Lines dataset file under the given task and split tags.
pub fn load_split(path: &Path, task: TaskTag, split: SplitName) -> Result<DatasetSplit> {
    load_jsonl(path, task, split).with_context(|| format!("loading {}", path.display()))
}

/// Where a tokenizer came from; fingerprint mismatches are fatal only
/// for explicitly supplied files.
pub enum TokenizerSource {
    File(PathBuf),
    /// Built on the fly from the data the command is processing.
    Derived,
}

/// A whitespace tokenizer whose vocabulary covers every text field of
/// the given splits, in first-occurrence order.
pub fn derive_tokenizer(splits: &[&DatasetSplit]) -> WhitespaceTokenizer {
    let texts = splits.iter().flat_map(|split| {
        split.instances.iter().flat_map(|inst| {
            std::iter::once(inst.passage.as_str())
                .chain(std::iter::once(inst.question.as_str()))
                .chain(inst.candidates.iter().map(String::as_str))
        })
    });
    WhitespaceTokenizer::from_texts(texts)
}

/// Resolve the tokenizer for a command: an explicit `--tokenizer` file,
/// else a sidecar saved next to a checkpoint, else one derived from the
/// data at hand.
pub fn obtain_tokenizer(
    explicit: Option<&Path>,
    sidecar: Option<&Path>,
    splits: &[&DatasetSplit],
) -> Result<(Box<dyn Tokenizer>, TokenizerSource)> {
    if let Some(path) = explicit {
        let tokenizer = load_tokenizer(path)
            .with_context(|| format!("loading tokenizer {}", path.display()))?;
        return Ok((tokenizer, TokenizerSource::File(path.to_path_buf())));
    }
    if let Some(path) = sidecar {
        if path.exists() {
            let tokenizer = load_tokenizer(path)
                .with_context(|| format!("loading tokenizer {}", path.display()))?;
            return Ok((tokenizer, TokenizerSource::File(path.to_path_buf())));
        }
    }
    if splits.is_empty() {
        bail!("no tokenizer given and no data to derive one from");
    }
    Ok((Box::new(derive_tokenizer(splits)), TokenizerSource::Derived))
}

/// Sidecar tokenizer path for a checkpoint: `<model>.tokenizer.json`.
pub fn tokenizer_sidecar(model: &Path) -> PathBuf {
    let mut name = model.file_name().unwrap_or_default().to_os_string();
    name.push(".tokenizer.json");
    model.with_file_name(name)
}

/// Compare a checkpoint's recorded tokenizer fingerprint against the
/// tokenizer actually in hand. A mismatch with an explicit tokenizer
/// file is an error; with a derived tokenizer it is a best-effort run
/// and only warned about.
pub fn check_fingerprint(
    recorded: [u8; 32],
    tokenizer: &dyn Tokenizer,
    source: &TokenizerSource,
) -> Result<()> {
    let actual = tokenizer.fingerprint();
    if actual == recorded {
        return Ok(());
    }
    match source {
        TokenizerSource::File(path) => bail!(
            "tokenizer {} (fingerprint {}) is not the one this checkpoint was \
             trained with (fingerprint {})",
            path.display(),
            hex::encode(&actual[..8]),
            hex::encode(&recorded[..8]),
        ),
        TokenizerSource::Derived => {
            eprintln!(
                "warning: derived tokenizer fingerprint {} differs from the \
                 checkpoint's {}; scores may be meaningless",
                hex::encode(&actual[..8]),
                hex::encode(&recorded[..8]),
            );
            Ok(())
        }
    }
}

/// Load a scoring checkpoint and verify its tokenizer.
pub fn load_scoring_model(
    path: &Path,
    tokenizer: &dyn Tokenizer,
    source: &TokenizerSource,
) -> Result<(ReferenceEncoder, ScoringHead)> {
    let (encoder, head, fingerprint) =
        load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    check_fingerprint(fingerprint, tokenizer, source)?;
    Ok((encoder, head))
}

/// Build an untrained encoder and head from the configuration, sized to
/// the tokenizer's vocabulary.
pub fn fresh_model(
    config: &PipelineConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<(ReferenceEncoder, ScoringHead)> {
    let encoder_config = config.encoder_config(tokenizer.vocab_size())?;
    let dim = encoder_config.dim;
    let encoder = ReferenceEncoder::new(encoder_config)?;
    let head = ScoringHead::new(dim, config.seed()?);
    Ok((encoder, head))
}
