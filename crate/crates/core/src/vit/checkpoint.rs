//! `FLCKPT01` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FLCKPT01"
//! count      u32      number of manifest entries
//! entry*     u32 name length, UTF-8 name, u8 dtype code, u32 rank, u32 extent per axis
//! payload    f32 values of every entry, in manifest order
//! crc        u32      CRC32 of the payload bytes
//! ```

use std::path::Path;

use super::config::ViTConfig;
use super::params::{check_against_config, expected_manifest, resize_pos_embed, Manifest, ModelParams};
use crate::error::{Error, Result};
use crate::io::{self, Reader};
use crate::tensor::Real;

pub const MAGIC: &[u8; 8] = b"FLCKPT01";

pub fn encode(params: &ModelParams<f32>) -> Vec<u8> {
    let (flat, manifest) = params.flatten();
    let mut out = Vec::with_capacity(64 + flat.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for (name, shape) in &manifest {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(f32::DTYPE_CODE);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    let payload_start = out.len();
    for v in &flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(8)? != MAGIC {
        return Err(Error::Corrupt("not an FLCKPT01 checkpoint".into()));
    }
    let count = r.u32()? as usize;
    let mut manifest: Manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != f32::DTYPE_CODE {
            return Err(Error::Corrupt(format!("unsupported dtype code {dtype} for `{name}`")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let numel: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if r.remaining() != numel * 4 + 4 {
        return Err(Error::Corrupt(format!(
            "payload holds {} bytes, manifest needs {}",
            r.remaining().saturating_sub(4),
            numel * 4
        )));
    }
    let start = r.position();
    let payload = r.take(numel * 4)?;
    let stored = r.u32()?;
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "payload CRC mismatch: stored {stored:08x}, computed {actual:08x} (payload at byte {start})"
        )));
    }
    let flat: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ModelParams::unflatten(&flat, &manifest)
}

pub fn save(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    io::write_atomic(path, &encode(params))
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    decode(&io::read(path)?)
}

/// Fits pretrained backbone weights to `cfg`: the positional table is
/// resampled to the configured grid and parameters the checkpoint lacks (the
/// classification head) are taken from `fallback`.
pub fn adapt_backbone(
    mut params: ModelParams<f32>,
    cfg: &ViTConfig,
    fallback: &ModelParams<f32>,
) -> Result<ModelParams<f32>> {
    if let Some(table) = params.remove("pos_embed") {
        params.insert("pos_embed", resize_pos_embed(&table, cfg.grid())?);
    }
    for (name, _) in expected_manifest(cfg) {
        if !params.contains(&name) {
            params.insert(name.clone(), fallback.get(&name)?.clone());
        }
    }
    check_against_config(&params, cfg)?;
    Ok(params)
}
