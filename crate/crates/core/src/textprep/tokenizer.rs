//! Tokenizer contract and the whitespace reference tokenizer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::bpe::{BpeSpecials, BpeTokenizer};

/// Shared tokenizer contract.
///
/// Implementations expose a fixed vocabulary with reserved, pairwise
/// distinct special ids. `tokenize` recognizes special-token surface forms
/// (so a masked question round-trips to its MASK id) and `detokenize`
/// inverts `tokenize` up to the implementation's documented normalization.
pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn pad_id(&self) -> u32;
    fn unk_id(&self) -> u32;
    fn cls_id(&self) -> u32;
    fn sep_id(&self) -> u32;
    fn mask_id(&self) -> u32;
    /// Surface form substituted for the placeholder when masking.
    fn mask_surface(&self) -> &str;
    fn tokenize(&self, text: &str) -> Vec<u32>;
    fn detokenize(&self, ids: &[u32]) -> String;
    fn token_to_id(&self, token: &str) -> Option<u32>;
    fn id_to_token(&self, id: u32) -> Option<String>;

    fn is_special(&self, id: u32) -> bool {
        id == self.pad_id()
            || id == self.unk_id()
            || id == self.cls_id()
            || id == self.sep_id()
            || id == self.mask_id()
    }

    /// Portable on-disk form, when the tokenizer supports one.
    fn export(&self) -> Result<TokenizerFile> {
        Err(Error::Tokenizer("tokenizer is not exportable".into()))
    }

    /// SHA-256 over the canonical serialized form; stored in checkpoints
    /// so a model is never silently paired with a different vocabulary.
    fn fingerprint(&self) -> [u8; 32] {
        match self.export() {
            Ok(file) => file.fingerprint(),
            Err(_) => [0u8; 32],
        }
    }
}

/// Serialized tokenizer artifact (JSON, self-contained).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TokenizerFile {
    Whitespace {
        words: Vec<String>,
    },
    Bpe {
        vocab: BTreeMap<String, u32>,
        merges: Vec<String>,
        specials: BpeSpecials,
    },
}

impl TokenizerFile {
    pub fn fingerprint(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("tokenizer file serializes");
        let mut out = [0u8; 32];
        out.copy_from_slice(&Sha256::digest(&bytes));
        out
    }
}

/// Persist a tokenizer as a self-contained JSON artifact.
pub fn save_tokenizer(tokenizer: &dyn Tokenizer, path: &Path) -> Result<()> {
    let file = tokenizer.export()?;
    let json = serde_json::to_string_pretty(&file).expect("tokenizer file serializes");
    fs::write(path, json).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a tokenizer artifact written by [`save_tokenizer`].
pub fn load_tokenizer(path: &Path) -> Result<Box<dyn Tokenizer>> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: TokenizerFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Tokenizer(format!("{}: {e}", path.display())))?;
    match file {
        TokenizerFile::Whitespace { words } => Ok(Box::new(WhitespaceTokenizer::from_words(words))),
        TokenizerFile::Bpe {
            vocab,
            merges,
            specials,
        } => Ok(Box::new(BpeTokenizer::from_parts(vocab, &merges, specials)?)),
    }
}

// ---------------------------------------------------------------------------
// Whitespace reference tokenizer
// ---------------------------------------------------------------------------

const WS_SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Splits on Unicode whitespace; one id per distinct word. Ids 0..=4 are
/// reserved for `[PAD] [UNK] [CLS] [SEP] [MASK]`. Out-of-vocabulary words
/// map to `[UNK]`, so detokenize(tokenize(text)) equals `text` up to
/// whitespace normalization and OOV replacement.
#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    words: Vec<String>,
    lookup: BTreeMap<String, u32>,
}

impl WhitespaceTokenizer {
    /// Build a vocabulary from `texts` in first-occurrence order.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut words = Vec::new();
        let mut seen = BTreeMap::new();
        for text in texts {
            for word in text.split_whitespace() {
                if WS_SPECIALS.contains(&word) {
                    continue;
                }
                if !seen.contains_key(word) {
                    seen.insert(word.to_string(), ());
                    words.push(word.to_string());
                }
            }
        }
        Self::from_words(words)
    }

    /// Build from an explicit word list (ids assigned in order after the
    /// specials).
    pub fn from_words(words: Vec<String>) -> Self {
        let mut lookup = BTreeMap::new();
        for (i, surface) in WS_SPECIALS.iter().enumerate() {
            lookup.insert(surface.to_string(), i as u32);
        }
        for (i, word) in words.iter().enumerate() {
            lookup.insert(word.clone(), (WS_SPECIALS.len() + i) as u32);
        }
        Self { words, lookup }
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn vocab_size(&self) -> usize {
        WS_SPECIALS.len() + self.words.len()
    }
    fn pad_id(&self) -> u32 {
        0
    }
    fn unk_id(&self) -> u32 {
        1
    }
    fn cls_id(&self) -> u32 {
        2
    }
    fn sep_id(&self) -> u32 {
        3
    }
    fn mask_id(&self) -> u32 {
        4
    }
    fn mask_surface(&self) -> &str {
        "[MASK]"
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.lookup.get(w).copied().unwrap_or(self.unk_id()))
            .collect()
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.id_to_token(id).unwrap_or_else(|| "[UNK]".into()))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn token_to_id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    fn id_to_token(&self, id: u32) -> Option<String> {
        let id = id as usize;
        if id < WS_SPECIALS.len() {
            Some(WS_SPECIALS[id].to_string())
        } else {
            self.words.get(id - WS_SPECIALS.len()).cloned()
        }
    }

    fn export(&self) -> Result<TokenizerFile> {
        Ok(TokenizerFile::Whitespace {
            words: self.words.clone(),
        })
    }
}
