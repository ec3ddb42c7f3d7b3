//! Byte-level BPE tokenizer loaded from `merges.txt` / `vocab.json`.
//!
//! `vocab.json` is a token-to-index map and `merges.txt` lists merge pairs
//! in rank order (an initial `#version` comment line is skipped). Text is
//! pre-split GPT-2 style, each piece is mapped through the byte-to-unicode
//! table, and adjacent symbols are merged lowest rank first. A leading
//! space inside a piece becomes the `Ġ` marker character.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tokenizer::{Tokenizer, TokenizerFile};

/// Surface forms for the reserved special tokens. Surfaces already present
/// in `vocab.json` keep their ids; missing ones are appended after the
/// base vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeSpecials {
    pub pad: String,
    pub unk: String,
    pub cls: String,
    pub sep: String,
    pub mask: String,
}

impl Default for BpeSpecials {
    fn default() -> Self {
        Self {
            pad: "[PAD]".into(),
            unk: "[UNK]".into(),
            cls: "[CLS]".into(),
            sep: "[SEP]".into(),
            mask: "[MASK]".into(),
        }
    }
}

impl BpeSpecials {
    /// RoBERTa-style surfaces (`<s>`, `</s>`, `<mask>`, ...).
    pub fn roberta() -> Self {
        Self {
            pad: "<pad>".into(),
            unk: "<unk>".into(),
            cls: "<s>".into(),
            sep: "</s>".into(),
            mask: "<mask>".into(),
        }
    }
}

pub struct BpeTokenizer {
    vocab: BTreeMap<String, u32>,
    inverse: HashMap<u32, String>,
    ranks: HashMap<(String, String), usize>,
    merges: Vec<String>,
    specials: BpeSpecials,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
    mask: u32,
    vocab_size: usize,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

impl BpeTokenizer {
    /// Load from the on-disk pair `merges.txt` + `vocab.json`.
    pub fn from_files(merges_path: &Path, vocab_path: &Path, specials: BpeSpecials) -> Result<Self> {
        let vocab_bytes = fs::read(vocab_path).map_err(|source| Error::Io {
            path: vocab_path.to_path_buf(),
            source,
        })?;
        let vocab: BTreeMap<String, u32> = serde_json::from_slice(&vocab_bytes)
            .map_err(|e| Error::Tokenizer(format!("{}: {e}", vocab_path.display())))?;
        let merges_text = fs::read_to_string(merges_path).map_err(|source| Error::Io {
            path: merges_path.to_path_buf(),
            source,
        })?;
        let merges: Vec<String> = merges_text.lines().map(str::to_string).collect();
        Self::from_parts(vocab, &merges, specials)
    }

    /// Build from already-parsed vocabulary and merge lines.
    pub fn from_parts(
        mut vocab: BTreeMap<String, u32>,
        merge_lines: &[String],
        specials: BpeSpecials,
    ) -> Result<Self> {
        let mut ranks = HashMap::new();
        let mut merges = Vec::new();
        for (i, line) in merge_lines.iter().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || (i == 0 && trimmed.starts_with('#')) {
                continue;
            }
            let mut parts = trimmed.split(' ');
            let (a, b) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => {
                    return Err(Error::Tokenizer(format!(
                        "merges line {}: expected two symbols, got `{trimmed}`",
                        i + 1
                    )))
                }
            };
            ranks.insert((a.to_string(), b.to_string()), merges.len());
            merges.push(trimmed.to_string());
        }

        let mut next_id = vocab.values().copied().max().map(|m| m + 1).unwrap_or(0);
        let mut special_id = |vocab: &mut BTreeMap<String, u32>, surface: &str| -> u32 {
            if let Some(&id) = vocab.get(surface) {
                id
            } else {
                let id = next_id;
                vocab.insert(surface.to_string(), id);
                next_id += 1;
                id
            }
        };
        let pad = special_id(&mut vocab, &specials.pad);
        let unk = special_id(&mut vocab, &specials.unk);
        let cls = special_id(&mut vocab, &specials.cls);
        let sep = special_id(&mut vocab, &specials.sep);
        let mask = special_id(&mut vocab, &specials.mask);

        let vocab_size = vocab.values().copied().max().map(|m| m as usize + 1).unwrap_or(0);
        let inverse: HashMap<u32, String> =
            vocab.iter().map(|(tok, &id)| (id, tok.clone())).collect();
        if inverse.len() != vocab.len() {
            return Err(Error::Tokenizer("vocab maps two tokens to one id".into()));
        }

        let (byte_to_char, char_to_byte) = byte_unicode_tables();
        Ok(Self {
            vocab,
            inverse,
            ranks,
            merges,
            specials,
            pad,
            unk,
            cls,
            sep,
            mask,
            vocab_size,
            byte_to_char,
            char_to_byte,
        })
    }

    /// Apply merges to one pre-tokenized piece, returning symbol strings.
    fn bpe_symbols(&self, piece: &str) -> Vec<String> {
        let mut symbols: Vec<String> = piece
            .bytes()
            .map(|b| self.byte_to_char[b as usize].to_string())
            .collect();
        if symbols.len() < 2 {
            return symbols;
        }
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len() - 1 {
                if let Some(&rank) = self
                    .ranks
                    .get(&(symbols[i].clone(), symbols[i + 1].clone()))
                {
                    if best.map(|(r, _)| rank < r).unwrap_or(true) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, at)) = best else { break };
            // Merge every occurrence of the winning pair, left to right.
            let (a, b) = (symbols[at].clone(), symbols[at + 1].clone());
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
            if symbols.len() < 2 {
                break;
            }
        }
        symbols
    }

    fn encode_plain(&self, text: &str, out: &mut Vec<u32>) {
        for piece in pretokenize(text) {
            for symbol in self.bpe_symbols(&piece) {
                out.push(self.vocab.get(&symbol).copied().unwrap_or(self.unk));
            }
        }
    }

    fn special_surfaces(&self) -> [&str; 5] {
        [
            self.specials.pad.as_str(),
            self.specials.unk.as_str(),
            self.specials.cls.as_str(),
            self.specials.sep.as_str(),
            self.specials.mask.as_str(),
        ]
    }
}

impl Tokenizer for BpeTokenizer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    fn pad_id(&self) -> u32 {
        self.pad
    }
    fn unk_id(&self) -> u32 {
        self.unk
    }
    fn cls_id(&self) -> u32 {
        self.cls
    }
    fn sep_id(&self) -> u32 {
        self.sep
    }
    fn mask_id(&self) -> u32 {
        self.mask
    }
    fn mask_surface(&self) -> &str {
        &self.specials.mask
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        // Split out special-token surfaces first, BPE-encode the rest.
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let hit = self
                .special_surfaces()
                .iter()
                .filter_map(|s| rest.find(s).map(|at| (at, *s)))
                .min_by_key(|&(at, s)| (at, std::cmp::Reverse(s.len())));
            match hit {
                Some((at, surface)) => {
                    self.encode_plain(&rest[..at], &mut out);
                    out.push(self.vocab[surface]);
                    rest = &rest[at + surface.len()..];
                }
                None => {
                    self.encode_plain(rest, &mut out);
                    break;
                }
            }
        }
        out
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.inverse.get(&id) {
                Some(token) if self.is_special(id) => bytes.extend_from_slice(token.as_bytes()),
                Some(token) => {
                    for ch in token.chars() {
                        match self.char_to_byte.get(&ch) {
                            Some(&b) => bytes.push(b),
                            None => bytes.extend_from_slice(ch.to_string().as_bytes()),
                        }
                    }
                }
                None => {}
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn token_to_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    fn id_to_token(&self, id: u32) -> Option<String> {
        self.inverse.get(&id).cloned()
    }

    fn export(&self) -> Result<TokenizerFile> {
        Ok(TokenizerFile::Bpe {
            vocab: self.vocab.clone(),
            merges: self.merges.clone(),
            specials: self.specials.clone(),
        })
    }
}

/// GPT-2 byte-to-unicode table: printable bytes map to themselves, the
/// rest to codepoints starting at 256, so every byte has a visible char.
fn byte_unicode_tables() -> ([char; 256], HashMap<char, u8>) {
    let mut to_char = ['\0'; 256];
    let mut printable: Vec<u8> = (b'!'..=b'~').collect();
    printable.extend(0xA1u8..=0xAC);
    printable.extend(0xAEu8..=0xFF);
    let mut extra = 0u32;
    for b in 0u16..256 {
        let b = b as u8;
        to_char[b as usize] = if printable.contains(&b) {
            b as char
        } else {
            let c = char::from_u32(256 + extra).expect("valid codepoint");
            extra += 1;
            c
        };
    }
    let mut to_byte = HashMap::new();
    for (b, &c) in to_char.iter().enumerate() {
        to_byte.insert(c, b as u8);
    }
    (to_char, to_byte)
}

/// GPT-2 style pre-tokenizer: contractions, letter runs, digit runs and
/// punctuation runs each form a piece, optionally absorbing one leading
/// space; interior whitespace runs keep all but their final space, which
/// attaches to the following piece.
fn pretokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        // Contractions win only when they start exactly here.
        if chars[i] == '\'' {
            if let Some(len) = contraction_len(&chars[i..]) {
                pieces.push(chars[i..i + len].iter().collect());
                i += len;
                continue;
            }
        }
        // ` ?X+`: an optional single leading space plus a class run.
        let lead = usize::from(chars[i] == ' ');
        if i + lead < chars.len() {
            let run_end = class_run_end(&chars, i + lead);
            if run_end > i + lead {
                pieces.push(chars[i..run_end].iter().collect());
                i = run_end;
                continue;
            }
        }
        if chars[i].is_whitespace() {
            let mut j = i;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            // A run followed by text yields its final space to that text.
            let end = if j < chars.len() && j - i > 1 { j - 1 } else { j };
            pieces.push(chars[i..end].iter().collect());
            i = end;
            continue;
        }
        pieces.push(chars[i].to_string());
        i += 1;
    }
    pieces
}

/// End of the maximal same-class run: letters, digits, or other
/// non-whitespace symbols (apostrophes count as symbols here).
fn class_run_end(chars: &[char], start: usize) -> usize {
    if start >= chars.len() {
        return start;
    }
    let c = chars[start];
    let pred: fn(char) -> bool = if c.is_alphabetic() {
        char::is_alphabetic
    } else if c.is_numeric() {
        char::is_numeric
    } else if !c.is_whitespace() {
        |ch| !ch.is_whitespace() && !ch.is_alphabetic() && !ch.is_numeric()
    } else {
        return start;
    };
    let mut end = start;
    while end < chars.len() && pred(chars[end]) {
        end += 1;
    }
    end
}

fn contraction_len(rest: &[char]) -> Option<usize> {
    const SUFFIXES: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
    for suffix in SUFFIXES {
        let sc: Vec<char> = suffix.chars().collect();
        if rest.len() >= sc.len() && rest[..sc.len()] == sc[..] {
            return Some(sc.len());
        }
    }
    None
}
