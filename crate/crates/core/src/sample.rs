//! One fMRI trial: two hemisphere channels of `V` float values plus
//! identity, and its bit-exact on-disk format.
//!
//! File layout (all little-endian):
//!
//! ```text
//! bytes 0..4    magic "OTF1"
//! bytes 4..16   reserved, must be zero
//! bytes 16..24  u64 vertex count V
//! then          2 * V  f32 values, channel 0 (left) first
//! then          u32 metadata length, then that many bytes of UTF-8 JSON
//!               {"subject_id", "image_id", "trial_index"}
//! ```

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SAMPLE_MAGIC: [u8; 4] = *b"OTF1";
const HEADER_LEN: u64 = 16;

/// `trial_index` value marking a trial-averaged sample.
pub const TRIAL_AVERAGED: u32 = u32::MAX;

/// A single trial's surface-mapped signal: channel 0 is the left hemisphere,
/// channel 1 the right, both of length `vertex_count()`.
#[derive(Clone, Debug, PartialEq)]
pub struct FmriSample {
    pub subject_id: String,
    pub image_id: String,
    pub trial_index: u32,
    channels: [Vec<f32>; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleMeta {
    subject_id: String,
    image_id: String,
    trial_index: u32,
}

impl FmriSample {
    pub fn new(
        subject_id: impl Into<String>,
        image_id: impl Into<String>,
        trial_index: u32,
        left: Vec<f32>,
        right: Vec<f32>,
    ) -> Result<Self> {
        if left.is_empty() {
            return Err(Error::invalid("sample", "vertex count must be positive"));
        }
        if left.len() != right.len() {
            return Err(Error::invalid(
                "sample",
                format!("channel lengths differ: {} vs {}", left.len(), right.len()),
            ));
        }
        for (c, ch) in [&left, &right].into_iter().enumerate() {
            if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "sample",
                    format!("non-finite value at channel {c}, vertex {i}"),
                ));
            }
        }
        Ok(FmriSample {
            subject_id: subject_id.into(),
            image_id: image_id.into(),
            trial_index,
            channels: [left, right],
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.channels[0].len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f32>; 2] {
        &self.channels
    }

    /// Both channels concatenated (channel 0 first); length `2 * V`.
    pub fn flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(2 * self.vertex_count());
        out.extend_from_slice(&self.channels[0]);
        out.extend_from_slice(&self.channels[1]);
        out
    }

    /// Replace channel values, keeping identity. Validates like `new`.
    pub fn with_values(&self, left: Vec<f32>, right: Vec<f32>) -> Result<Self> {
        FmriSample::new(
            self.subject_id.clone(),
            self.image_id.clone(),
            self.trial_index,
            left,
            right,
        )
    }

    /// Serialized byte image of this sample.
    pub fn to_bytes(&self) -> Vec<u8> {
        let v = self.vertex_count();
        let meta = serde_json::to_vec(&SampleMeta {
            subject_id: self.subject_id.clone(),
            image_id: self.image_id.clone(),
            trial_index: self.trial_index,
        })
        .expect("sample metadata serializes");
        let mut out = Vec::with_capacity(16 + 8 + 8 * v + 4 + meta.len());
        out.extend_from_slice(&SAMPLE_MAGIC);
        out.extend_from_slice(&[0u8; 12]);
        out.extend_from_slice(&(v as u64).to_le_bytes());
        for ch in &self.channels {
            for val in ch {
                out.extend_from_slice(&val.to_le_bytes());
            }
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Decode from bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let decode_err = |offset: u64, reason: String| Error::Decode {
            path: path.to_path_buf(),
            offset,
            reason,
        };
        let need = |end: u64, what: &str| -> Result<()> {
            if (bytes.len() as u64) < end {
                Err(decode_err(
                    bytes.len() as u64,
                    format!("truncated: need {end} bytes for {what}, have {}", bytes.len()),
                ))
            } else {
                Ok(())
            }
        };

        need(HEADER_LEN, "header")?;
        if bytes[0..4] != SAMPLE_MAGIC {
            return Err(decode_err(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        if bytes[4..16].iter().any(|&b| b != 0) {
            return Err(decode_err(4, "unsupported version (reserved bytes not zero)".into()));
        }
        need(HEADER_LEN + 8, "vertex count")?;
        let v = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if v == 0 {
            return Err(decode_err(16, "vertex count is zero".into()));
        }
        let payload_start = HEADER_LEN + 8;
        let payload_len = v
            .checked_mul(8)
            .ok_or_else(|| decode_err(16, format!("vertex count {v} overflows payload size")))?;
        let payload_end = payload_start + payload_len;
        need(payload_end, "channel payload")?;
        let v = v as usize;

        let mut channels = [Vec::with_capacity(v), Vec::with_capacity(v)];
        for (c, ch) in channels.iter_mut().enumerate() {
            for i in 0..v {
                let off = payload_start as usize + (c * v + i) * 4;
                let val = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                if !val.is_finite() {
                    return Err(decode_err(
                        off as u64,
                        format!("non-finite value at channel {c}, vertex {i}"),
                    ));
                }
                ch.push(val);
            }
        }

        need(payload_end + 4, "metadata length")?;
        let meta_start = payload_end as usize + 4;
        let meta_len =
            u32::from_le_bytes(bytes[payload_end as usize..meta_start].try_into().unwrap()) as usize;
        need((meta_start + meta_len) as u64, "metadata block")?;
        let meta: SampleMeta = serde_json::from_slice(&bytes[meta_start..meta_start + meta_len])
            .map_err(|e| decode_err(meta_start as u64, format!("invalid metadata: {e}")))?;
        if bytes.len() > meta_start + meta_len {
            return Err(decode_err(
                (meta_start + meta_len) as u64,
                format!("{} trailing bytes", bytes.len() - meta_start - meta_len),
            ));
        }

        Ok(FmriSample {
            subject_id: meta.subject_id,
            image_id: meta.image_id,
            trial_index: meta.trial_index,
            channels,
        })
    }
}
