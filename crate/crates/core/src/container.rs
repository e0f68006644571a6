//! Named-tensor file format.
//!
//! Layout: magic `DDTENSOR`, `u32` LE version, `u64` LE header length, a JSON
//! header `{"meta": …, "tensors": [{name, dtype, shape, offset}]}`, then the
//! little-endian `f32` payload. Offsets are byte offsets into the payload;
//! tensors are stored back to back in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DDTENSOR";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

pub fn encode(meta: &Value, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        if entries.iter().any(|e: &Entry| &e.name == name) {
            return Err(bad(format!("duplicate tensor name {name}")));
        }
        entries.push(Entry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<(String, Tensor)>)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a tensor container (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported container version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let payload_start = 20u64
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| bad("truncated header"))? as usize;
    let header: Header = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| bad(format!("corrupt header: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut expected = 0u64;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(bad(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| bad(format!("tensor {}: shape overflows", e.name)))?;
        if e.offset != expected {
            return Err(bad(format!(
                "shape mismatch: tensor {} starts at byte {}, expected {expected}",
                e.name, e.offset
            )));
        }
        let end = numel
            .checked_mul(4)
            .and_then(|n| n.checked_add(e.offset))
            .ok_or_else(|| bad(format!("tensor {}: shape overflows", e.name)))?;
        if end > payload.len() as u64 {
            return Err(bad(format!(
                "shape mismatch or truncated payload: tensor {} needs bytes {}..{end}, payload has {}",
                e.name,
                e.offset,
                payload.len()
            )));
        }
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name, Tensor::from_vec(&e.shape, data)?));
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(bad(format!(
            "shape mismatch: header describes {expected} payload bytes, file has {}",
            payload.len()
        )));
    }
    Ok((header.meta, out))
}

pub fn write(path: &Path, meta: &Value, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode(meta, tensors)?)
}

pub fn read(path: &Path) -> Result<(Value, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Container(m) => Error::Container(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Look up one tensor by name.
pub fn take(tensors: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| bad(format!("missing tensor {name}")))?;
    Ok(tensors.swap_remove(i).1)
}
