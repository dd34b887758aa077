//! Flat binary matrix files with a JSON sidecar, the shared convention for
//! feature sets, latent targets, and ground-truth matrices.
//!
//! Sidecar: `{"n": rows, "d": cols, "dtype": "f32le", "file": "payload.bin",
//! "image_ids": [...]?}`; payload is `n * d` little-endian f32 values,
//! row-major, in `file` resolved relative to the sidecar's directory.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    n: usize,
    d: usize,
    dtype: String,
    file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_ids: Option<Vec<String>>,
}

/// An `n x d` row-major f32 matrix, optionally indexed by image id.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixFile {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
    pub image_ids: Option<Vec<String>>,
}

impl MatrixFile {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::invalid(
                "matrix",
                format!("{n} x {d} needs {} values, got {}", n * d, data.len()),
            ));
        }
        Ok(MatrixFile {
            n,
            d,
            data,
            image_ids: None,
        })
    }

    pub fn with_image_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n {
            return Err(Error::invalid(
                "matrix",
                format!("{} image ids for {} rows", ids.len(), self.n),
            ));
        }
        self.image_ids = Some(ids);
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Write sidecar `path` (JSON) plus its binary payload next to it. The
/// payload file name is the sidecar's stem plus `.bin`.
pub fn save_matrix(matrix: &MatrixFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::invalid("matrix path", "missing file name"))?
        .to_string_lossy()
        .to_string();
    let bin_name = format!("{stem}.bin");
    let sidecar = Sidecar {
        n: matrix.n,
        d: matrix.d,
        dtype: "f32le".to_string(),
        file: bin_name.clone(),
        image_ids: matrix.image_ids.clone(),
    };
    let mut bytes = Vec::with_capacity(matrix.data.len() * 4);
    for v in &matrix.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let bin_path = path.with_file_name(&bin_name);
    std::fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    std::fs::write(
        path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(path, e))
}

/// Load a sidecar + payload pair, validating dimensions and finiteness.
/// Non-finite entries are rejected naming the offending row.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<MatrixFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if sidecar.dtype != "f32le" {
        return Err(Error::invalid(
            "matrix sidecar",
            format!("unsupported dtype {:?}", sidecar.dtype),
        ));
    }
    if let Some(ids) = &sidecar.image_ids {
        if ids.len() != sidecar.n {
            return Err(Error::invalid(
                "matrix sidecar",
                format!("{} image ids for {} rows", ids.len(), sidecar.n),
            ));
        }
    }
    let bin_path = path.with_file_name(&sidecar.file);
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected = sidecar.n * sidecar.d * 4;
    if bytes.len() != expected {
        return Err(Error::Decode {
            path: bin_path,
            offset: bytes.len() as u64,
            reason: format!("payload is {} bytes, expected {expected}", bytes.len()),
        });
    }
    let mut data = Vec::with_capacity(sidecar.n * sidecar.d);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Decode {
                path: bin_path,
                offset: (i * 4) as u64,
                reason: format!("non-finite value in row {}", i / sidecar.d),
            });
        }
        data.push(v);
    }
    Ok(MatrixFile {
        n: sidecar.n,
        d: sidecar.d,
        data,
        image_ids: sidecar.image_ids,
    })
}
