//! Binary checkpoint format for the reference encoder.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CQCP" | version u32 | tokenizer fingerprint [u8; 32]
//! config-json len u64 | config-json bytes
//! tensor count u64
//!   per tensor: name len u64 | name bytes
//!               rank u64 | dims u64...
//!               value count u64 | values f64...
//! ```
//!
//! Values round-trip bit-exactly. The tokenizer fingerprint records which
//! vocabulary the weights were trained against; loaders compare it before
//! trusting token ids. Tensors beyond the encoder layout (for example a
//! scoring head) ride along as extras.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::reference::{ReferenceEncoder, ReferenceEncoderConfig};

const MAGIC: &[u8; 4] = b"CQCP";
const VERSION: u32 = 1;

/// A saved model: architecture, tokenizer identity, and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ReferenceEncoderConfig,
    pub tokenizer_fingerprint: [u8; 32],
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshot an encoder plus any extra tensors (e.g. head weights).
    pub fn from_encoder(
        encoder: &ReferenceEncoder,
        tokenizer_fingerprint: [u8; 32],
        extras: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Self {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = encoder
            .layout()
            .iter()
            .map(|spec| {
                let data = encoder.params()[spec.offset..spec.offset + spec.len()].to_vec();
                (spec.name.clone(), spec.shape.clone(), data)
            })
            .collect();
        tensors.extend(extras.iter().cloned());
        Self {
            config: encoder.config().clone(),
            tokenizer_fingerprint,
            tensors,
        }
    }

    /// Rebuild the encoder; tensors outside its layout are returned as
    /// extras. Every layout tensor must be present with its exact shape.
    pub fn into_encoder(&self) -> Result<(ReferenceEncoder, Vec<(String, Vec<usize>, Vec<f64>)>)> {
        let mut encoder = ReferenceEncoder::new(self.config.clone())?;
        let mut extras = Vec::new();
        let layout: Vec<_> = encoder.layout().to_vec();
        let mut seen = vec![false; layout.len()];
        for (name, shape, data) in &self.tensors {
            match layout.iter().position(|s| &s.name == name) {
                Some(idx) => {
                    let spec = &layout[idx];
                    if &spec.shape != shape {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{name}`: shape {shape:?} does not match expected {:?}",
                            spec.shape
                        )));
                    }
                    if data.len() != spec.len() {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{name}`: {} values for shape {shape:?}",
                            data.len()
                        )));
                    }
                    encoder.params_mut()[spec.offset..spec.offset + spec.len()]
                        .copy_from_slice(data);
                    seen[idx] = true;
                }
                None => extras.push((name.clone(), shape.clone(), data.clone())),
            }
        }
        if let Some(idx) = seen.iter().position(|&s| !s) {
            return Err(Error::Checkpoint(format!(
                "missing tensor `{}`",
                layout[idx].name
            )));
        }
        Ok((encoder, extras))
    }

    /// Look up one tensor by name.
    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, shape, data)| (shape.as_slice(), data.as_slice()))
    }
}

/// Write a checkpoint; the file is fully rewritten.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io_err);

    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&checkpoint.tokenizer_fingerprint)?;
    let config = serde_json::to_vec(&checkpoint.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    put(&(config.len() as u64).to_le_bytes())?;
    put(&config)?;
    put(&(checkpoint.tensors.len() as u64).to_le_bytes())?;
    for (name, shape, data) in &checkpoint.tensors {
        put(&(name.len() as u64).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&(shape.len() as u64).to_le_bytes())?;
        for &dim in shape {
            put(&(dim as u64).to_le_bytes())?;
        }
        put(&(data.len() as u64).to_le_bytes())?;
        for &value in data {
            put(&value.to_le_bytes())?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let mut tokenizer_fingerprint = [0u8; 32];
    r.read_exact(&mut tokenizer_fingerprint).map_err(io_err)?;

    let config_len = read_u64(&mut r, path)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes).map_err(io_err)?;
    let config: ReferenceEncoderConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: bad config json: {e}", path.display())))?;

    let count = read_u64(&mut r, path)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 tensor name", path.display())))?;
        let rank = read_u64(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let len = read_u64(&mut r, path)? as usize;
        if len != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor `{name}` length {len} does not match shape {shape:?}",
                path.display()
            )));
        }
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf).map_err(io_err)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push((name, shape, data));
    }
    Ok(Checkpoint {
        config,
        tokenizer_fingerprint,
        tensors,
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(u64::from_le_bytes(buf))
}
