//! CPWT weight serialization.
//!
//! Layout: magic "CPWT", version byte, u32 LE entry count; each entry is
//! u16 LE name length + UTF-8 name + dtype byte (0 = f32) + rank byte +
//! u32 LE dims + raw little-endian f32 values. Bit-exact round-trips are
//! required; the truncated SHA-256 of the whole file binds bitstreams to
//! the exact weights that produced them.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::{Constraint, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CPWT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported version {0} at offset 4")]
    UnsupportedVersion(u8),
    #[error("truncated weight file at offset {0}")]
    Truncated(usize),
    #[error("entry {index}: invalid UTF-8 name at offset {offset}")]
    BadName { index: usize, offset: usize },
    #[error("entry {name:?}: unsupported dtype {dtype}")]
    BadDtype { name: String, dtype: u8 },
    #[error("entry {name:?}: shape {shape:?} does not match stored parameter {stored:?}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        stored: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializes every parameter in registration order.
pub fn store_to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.push(p.tensor.rank() as u8);
        for &d in &p.tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.tensor.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses a CPWT byte buffer into entries; never reads past the buffer.
pub fn bytes_to_entries(bytes: &[u8]) -> Result<Vec<WeightEntry>, WeightError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], WeightError> {
        if *pos + n > bytes.len() {
            return Err(WeightError::Truncated(*pos));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(WeightError::BadMagic);
    }
    let version = take(&mut pos, 1)?[0];
    if version != VERSION {
        return Err(WeightError::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("len 4")) as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for index in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("len 2")) as usize;
        let name_offset = pos;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| WeightError::BadName { index, offset: name_offset })?
            .to_string();
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(WeightError::BadDtype { name, dtype });
        }
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("len 4")) as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        // reject absurd sizes before allocating
        if numel.saturating_mul(4) > bytes.len() {
            return Err(WeightError::Truncated(pos));
        }
        let raw = take(&mut pos, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("len 4")))
            .collect();
        entries.push(WeightEntry { name, shape, data });
    }
    Ok(entries)
}

/// Builds an unconstrained parameter store from entries (inference path).
pub fn entries_to_store(entries: &[WeightEntry]) -> Result<ParamStore, WeightError> {
    let mut store = ParamStore::new();
    for e in entries {
        let t = Tensor::from_f32(e.shape.clone(), &e.data).map_err(|_| WeightError::ShapeMismatch {
            name: e.name.clone(),
            shape: e.shape.clone(),
            stored: vec![],
        })?;
        store
            .register(&e.name, t, Constraint::None)
            .map_err(|_| WeightError::BadName { index: 0, offset: 0 })?;
    }
    Ok(store)
}

/// Overwrites matching parameters in an already-registered store. Returns the
/// names that were applied. Non-matching entries are skipped when `strict`
/// is false (used for stage-2 init from classifier weights).
pub fn apply_entries(
    store: &mut ParamStore,
    entries: &[WeightEntry],
    strict: bool,
) -> Result<Vec<String>, WeightError> {
    let mut applied = Vec::new();
    for e in entries {
        match store.id(&e.name) {
            Ok(id) => {
                let stored_shape = store.value(id).shape.clone();
                if stored_shape != e.shape {
                    return Err(WeightError::ShapeMismatch {
                        name: e.name.clone(),
                        shape: e.shape.clone(),
                        stored: stored_shape,
                    });
                }
                store.set_value(id, e.data.iter().map(|&v| v as f64).collect());
                applied.push(e.name.clone());
            }
            Err(_) if !strict => {}
            Err(_) => {
                return Err(WeightError::ShapeMismatch {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    stored: vec![],
                })
            }
        }
    }
    Ok(applied)
}

/// Truncated digest binding a bitstream to the exact weight bytes.
pub fn model_hash(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    digest[..8].try_into().expect("len 8")
}

pub fn save_file(path: &Path, store: &ParamStore) -> Result<[u8; 8], WeightError> {
    let bytes = store_to_bytes(store);
    std::fs::write(path, &bytes)?;
    Ok(model_hash(&bytes))
}

pub fn load_file(path: &Path) -> Result<(Vec<WeightEntry>, [u8; 8]), WeightError> {
    let bytes = std::fs::read(path)?;
    let entries = bytes_to_entries(&bytes)?;
    Ok((entries, model_hash(&bytes)))
}
