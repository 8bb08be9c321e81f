//! Parameter file format.
//!
//! ```text
//! magic   8 bytes   "GUESSPRM"
//! version u32 LE
//! hlen    u64 LE    length of the JSON header
//! header  hlen bytes UTF-8 JSON: {"meta": .., "tensors": [{"name", "shape"}, ..]}
//! blob    little-endian f64 values of every tensor, in header order
//! ```
//!
//! Serialization is deterministic: equal inputs give identical bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"GUESSPRM";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    tensors: Vec<TensorEntry>,
}

pub fn encode<M: Serialize>(meta: &M, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<(String, Tensor)>)> {
    let corrupt = |offset: usize, reason: &str| Error::Corrupt {
        offset: offset as u64,
        reason: reason.to_string(),
    };
    if bytes.len() < 20 {
        return Err(corrupt(bytes.len(), "truncated preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(8, &format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(12, "header length exceeds file"))?;
    let header: Header<M> = serde_json::from_slice(&bytes[20..body])
        .map_err(|e| corrupt(20 + e.column().saturating_sub(1), &format!("header: {e}")))?;

    let mut offset = body;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 8 * n;
        if end > bytes.len() {
            return Err(corrupt(offset, &format!("tensor `{}` truncated", entry.name)));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape, data)
            .map_err(|e| corrupt(offset, &format!("tensor `{}`: {e}", entry.name)))?;
        tensors.push((entry.name, t));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(corrupt(offset, "trailing bytes after last tensor"));
    }
    Ok((header.meta, tensors))
}

pub fn write<M: Serialize>(path: &Path, meta: &M, tensors: &[(String, &Tensor)]) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Invalid("empty checkpoint path".into()));
    }
    let bytes = encode(meta, tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<(String, Tensor)>)> {
    if path.as_os_str().is_empty() {
        return Err(Error::Invalid("empty checkpoint path".into()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
