//! Versioned binary container for named f32 tensors plus a typed JSON
//! header, used by training checkpoints and regression heads.
//!
//! Layout: magic `OTC1`, u32 version, u64 header length, header JSON, then
//! the tensor payloads as little-endian f32 in header order. Unknown header
//! fields are rejected by the typed decoders.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CONTAINER_MAGIC: [u8; 4] = *b"OTC1";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Write `meta` (any serializable struct) and named tensors to `path`.
pub fn write_container<M: Serialize>(
    path: impl AsRef<Path>,
    kind: &str,
    meta: &M,
    tensors: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let path = path.as_ref();
    let envelope = Envelope {
        kind: kind.to_string(),
        meta: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&envelope).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload_len: usize = tensors.iter().map(|(_, t)| t.len() * 4).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload_len);
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a container, checking magic, version, kind, and exact payload size.
/// `M` must consume the whole meta object (`deny_unknown_fields`).
pub fn read_container<M: DeserializeOwned>(
    path: impl AsRef<Path>,
    expected_kind: &str,
) -> Result<(M, Vec<(String, Tensor<f32>)>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
    if bytes.len() < 16 {
        return Err(fail("file too short for header".into()));
    }
    if bytes[0..4] != CONTAINER_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail("truncated header".into()));
    }
    let envelope: Envelope = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| fail(format!("invalid header: {e}")))?;
    if envelope.kind != expected_kind {
        return Err(fail(format!(
            "kind {:?}, expected {expected_kind:?}",
            envelope.kind
        )));
    }
    let meta: M = serde_json::from_value(envelope.meta)
        .map_err(|e| fail(format!("invalid metadata: {e}")))?;

    let mut offset = 16 + header_len;
    let mut tensors = Vec::with_capacity(envelope.tensors.len());
    for entry in &envelope.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 4;
        if bytes.len() < end {
            return Err(fail(format!("truncated payload for tensor {}", entry.name)));
        }
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(fail(format!("{} trailing payload bytes", bytes.len() - offset)));
    }
    Ok((meta, tensors))
}
