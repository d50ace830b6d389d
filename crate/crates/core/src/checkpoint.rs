//! The FTP1 checkpoint format.
//!
//! ```text
//! "FTP1" | u32 LE header length L | L bytes of UTF-8 JSON header | payload
//! ```
//!
//! The header is `{"tensors": [{"name", "shape", "dtype": "f32", "offset"}],
//! "meta": {"round", "seed"}}`; offsets index the payload in bytes and
//! the payload holds little-endian f32 data with tensors in insertion order.
//! The same bytes travel base64-encoded in trainer requests.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 4] = b"FTP1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<u64>,
    dtype: String,
    offset: u64,
}

pub fn encode(params: &ParameterSet, meta: &CheckpointMeta) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            };
            offset += 4 * t.data().len() as u64;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        tensors,
        meta: *meta,
    })
    .expect("header serializes");

    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ParameterSet, CheckpointMeta)> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing FTP1 magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {header_len} exceeds file")))?;
    let header_text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| bad(format!("header is not UTF-8: {e}")))?;
    let header: Header =
        serde_json::from_str(header_text).map_err(|e| bad(format!("header JSON: {e}")))?;
    let payload = &bytes[header_end..];

    let mut params = ParameterSet::new();
    for entry in header.tensors {
        if entry.dtype != "f32" {
            return Err(bad(format!(
                "tensor {:?} has dtype {:?}, only f32 is supported",
                entry.name, entry.dtype
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad(format!("tensor {:?} shape overflows", entry.name)))?;
        let start = entry.offset as usize;
        let end = numel
            .checked_mul(4)
            .and_then(|n| n.checked_add(entry.offset))
            .filter(|&e| e as usize <= payload.len())
            .ok_or_else(|| bad(format!("tensor {:?} runs past the payload", entry.name)))?
            as usize;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape, data)?;
        params.insert(entry.name, tensor)?;
    }
    Ok((params, header.meta))
}

/// Writes via a sibling temp file and rename so readers never observe a
/// partial checkpoint.
pub fn write_checkpoint(path: &Path, params: &ParameterSet, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(params, meta);
    let tmp = path.with_extension("ftp1.tmp");
    let ctx = || format!("writing checkpoint {}", path.display());
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(ctx(), e))?;
    f.sync_all().map_err(|e| Error::io(ctx(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ParameterSet, CheckpointMeta)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode(&bytes)
}
