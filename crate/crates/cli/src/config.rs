//! Flat key-value pipeline configuration.
//!
//! Settings resolve in four layers, later layers winning: preset defaults,
//! the config file (`--config` flag or the `CLOZEQA_CONFIG` environment
//! variable), then `--set key=value` flag overrides. The fully resolved
//! map is echoed into every run manifest so a run can be reproduced from
//! its artifacts alone.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clozeqa::encoder::ReferenceEncoderConfig;
use clozeqa::mcscorer::TrainConfig;
use clozeqa::probe::Similarity;

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "CLOZEQA_CONFIG";

/// Every recognized key, with a short description for `--help` and typo
/// diagnostics.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("preset", "hyperparameter preset: reference | roberta_large | albert_xxlarge | deberta_large"),
    ("max_len", "total input length budget, special tokens included"),
    ("stride", "chunk stride in tokens, or `auto` for half the passage budget"),
    ("epochs", "fine-tuning epochs"),
    ("learning_rate", "optimizer step size"),
    ("weight_decay", "decoupled weight decay coefficient"),
    ("accumulation", "micro-batches averaged into one optimizer update"),
    ("label_smoothing", "smoothing mass spread over wrong candidates"),
    ("seed", "seed for initialization, shuffling, and sampling"),
    ("encoder.layers", "reference encoder transformer layers"),
    ("encoder.heads", "reference encoder attention heads"),
    ("encoder.dim", "reference encoder hidden width"),
    ("encoder.ff_dim", "reference encoder feed-forward width"),
    ("encoder.max_positions", "reference encoder position table size"),
    ("mask_rate", "fraction of tokens masked when generating MLM data"),
    ("similarity", "zero-shot scoring rule: mask-likelihood | embedding-cosine"),
    ("bucket_edges", "comma-separated passage-length bucket edges"),
    ("error_limit", "maximum cases in an error report"),
];

/// Fully resolved configuration: every known key maps to a value.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    entries: BTreeMap<String, String>,
}

fn preset_defaults(preset: &str) -> Result<BTreeMap<String, String>> {
    let train = match preset {
        "reference" => TrainConfig::reference(),
        "roberta_large" => TrainConfig::roberta_large(),
        "albert_xxlarge" => TrainConfig::albert_xxlarge(),
        "deberta_large" => TrainConfig::deberta_large(),
        other => bail!(
            "unknown preset `{other}` (expected reference, roberta_large, \
             albert_xxlarge, or deberta_large)"
        ),
    };
    let enc = ReferenceEncoderConfig::default();
    let mut map = BTreeMap::new();
    let mut put = |k: &str, v: String| map.insert(k.to_string(), v);
    put("preset", preset.to_string());
    put("max_len", train.max_len.to_string());
    put(
        "stride",
        train.stride.map_or("auto".into(), |s| s.to_string()),
    );
    put("epochs", train.epochs.to_string());
    put("learning_rate", train.lr.to_string());
    put("weight_decay", train.weight_decay.to_string());
    put("accumulation", train.accumulation.to_string());
    put("label_smoothing", train.label_smoothing.to_string());
    put("seed", train.seed.to_string());
    put("encoder.layers", enc.layers.to_string());
    put("encoder.heads", enc.heads.to_string());
    put("encoder.dim", enc.dim.to_string());
    put("encoder.ff_dim", enc.ff_dim.to_string());
    put("encoder.max_positions", enc.max_positions.to_string());
    put("mask_rate", "0.15".into());
    put("similarity", "mask-likelihood".into());
    put("bucket_edges", "128,256,384,512".into());
    put("error_limit", "20".into());
    Ok(map)
}

/// Parse one `key = value` file into a map, tracking line numbers for
/// diagnostics. `#` starts a comment; blank lines are skipped.
fn parse_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (number, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').with_context(|| {
            format!(
                "{}:{}: expected `key = value`, got `{raw}`",
                path.display(),
                number + 1
            )
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn check_known(source: &str, map: &BTreeMap<String, String>) -> Result<()> {
    for key in map.keys() {
        if !KNOWN_KEYS.iter().any(|(k, _)| k == key) {
            bail!("{source}: unknown config key `{key}`");
        }
    }
    Ok(())
}

impl PipelineConfig {
    /// Resolve the effective configuration from an optional file and
    /// `--set` overrides.
    pub fn resolve(config_path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let env_path = std::env::var_os(CONFIG_ENV).map(std::path::PathBuf::from);
        let path = config_path.or(env_path.as_deref());
        let file_map = match path {
            Some(p) => parse_file(p)?,
            None => BTreeMap::new(),
        };
        check_known("config file", &file_map)?;
        let override_map: BTreeMap<String, String> = overrides.iter().cloned().collect();
        check_known("--set", &override_map)?;

        // The preset decides the defaults, so settle it first.
        let preset = override_map
            .get("preset")
            .or_else(|| file_map.get("preset"))
            .map(String::as_str)
            .unwrap_or("reference");
        let mut entries = preset_defaults(preset)?;
        entries.extend(file_map);
        entries.extend(override_map);
        Ok(Self { entries })
    }

    /// The resolved map, for manifests.
    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .with_context(|| format!("config key `{key}` missing"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|e| anyhow::anyhow!("config key `{key}` = `{raw}`: {e}"))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn max_len(&self) -> Result<usize> {
        self.parse("max_len")
    }

    /// `None` means the library default stride (half the passage budget).
    pub fn stride(&self) -> Result<Option<usize>> {
        match self.raw("stride")? {
            "auto" => Ok(None),
            raw => Ok(Some(raw.parse().map_err(|e| {
                anyhow::anyhow!("config key `stride` = `{raw}`: {e}")
            })?)),
        }
    }

    pub fn mask_rate(&self) -> Result<f64> {
        self.parse("mask_rate")
    }

    pub fn similarity(&self) -> Result<Similarity> {
        self.parse("similarity")
    }

    pub fn error_limit(&self) -> Result<usize> {
        self.parse("error_limit")
    }

    pub fn bucket_edges(&self) -> Result<Vec<usize>> {
        let raw = self.raw("bucket_edges")?;
        raw.split(',')
            .map(|part| {
                part.trim()
                    .parse()
                    .map_err(|e| anyhow::anyhow!("config key `bucket_edges` entry `{part}`: {e}"))
            })
            .collect()
    }

    /// Fine-tuning settings assembled from the flat keys.
    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            max_len: self.max_len()?,
            stride: self.stride()?,
            epochs: self.parse("epochs")?,
            lr: self.parse("learning_rate")?,
            weight_decay: self.parse("weight_decay")?,
            accumulation: self.parse("accumulation")?,
            label_smoothing: self.parse("label_smoothing")?,
            seed: self.seed()?,
        })
    }

    /// Reference-encoder architecture for a vocabulary of `vocab_size`.
    pub fn encoder_config(&self, vocab_size: usize) -> Result<ReferenceEncoderConfig> {
        Ok(ReferenceEncoderConfig {
            layers: self.parse("encoder.layers")?,
            heads: self.parse("encoder.heads")?,
            dim: self.parse("encoder.dim")?,
            ff_dim: self.parse("encoder.ff_dim")?,
            max_positions: self.parse("encoder.max_positions")?,
            vocab_size,
            seed: self.seed()?,
        })
    }
}

/// Parse one `--set key=value` argument.
pub fn parse_override(raw: &str) -> Result<(String, String)> {
    let (key, value) = raw
        .split_once('=')
        .with_context(|| format!("--set expects key=value, got `{raw}`"))?;
    Ok((key.trim().to_string(), value.trim().to_string()))
}
