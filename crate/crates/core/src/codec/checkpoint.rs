//! Model checkpoint file.
//!
//! Layout (integers little-endian):
//! `"IMFCKPT\0"`, `u32` version, `u64` config hash, length-prefixed
//! `LayerSpec` JSON, `u64` block count, then per block a length-prefixed name,
//! `u64` rank, `u64` dims and the block's `f64` values.

use std::path::Path;

use super::{LayerSpec, ModelParams};
use crate::binio::{atomic_write, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IMFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &ModelParams, config_hash: u64) -> Result<Vec<u8>> {
    let mut w = Writer::new(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(config_hash);
    w.bytes(serde_json::to_string(&params.spec)?.as_bytes());
    w.u64(params.blocks.len() as u64);
    for b in &params.blocks {
        w.bytes(b.name.as_bytes());
        w.u64(b.shape.len() as u64);
        b.shape.iter().for_each(|&d| w.u64(d as u64));
        params.values[b.range()].iter().for_each(|&v| w.f64(v));
    }
    Ok(w.buf)
}

/// Parses a checkpoint; with `expect_hash` set, a different stored config
/// hash is a [`Error::VersionMismatch`]. Returns the stored hash as well.
pub fn read_checkpoint(bytes: &[u8], expect_hash: Option<u64>) -> Result<(ModelParams, u64)> {
    let mut r = Reader::new(bytes, MAGIC, "checkpoint")?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hash = r.u64()?;
    if let Some(h) = expect_hash.filter(|&h| h != hash) {
        return Err(Error::VersionMismatch(format!("config hash {hash:016x}, expected {h:016x}")));
    }
    let spec: LayerSpec = serde_json::from_str(r.str()?).map_err(|e| Error::CorruptRecord(e.to_string()))?;
    let mut params = ModelParams::init(&spec, 0).map_err(|e| Error::CorruptRecord(e.to_string()))?;
    let count = r.u64()?;
    if count != params.blocks.len() as u64 {
        return Err(Error::CorruptRecord(format!(
            "{count} parameter blocks, layout has {}",
            params.blocks.len()
        )));
    }
    for b in &params.blocks {
        let name = r.str()?;
        let rank = r.u64()?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != b.name || shape != b.shape {
            return Err(Error::CorruptRecord(format!(
                "block {name} {shape:?} does not match layout {} {:?}",
                b.name, b.shape
            )));
        }
        for v in &mut params.values[b.range()] {
            *v = r.f64()?;
        }
    }
    r.finish()?;
    Ok((params, hash))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, config_hash: u64) -> Result<()> {
    atomic_write(path, &write_checkpoint(params, config_hash)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>, expect_hash: Option<u64>) -> Result<(ModelParams, u64)> {
    read_checkpoint(&std::fs::read(path)?, expect_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::desk_config;

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let cfg = desk_config();
        let params = ModelParams::init(&LayerSpec::for_config(&cfg, true), 9).unwrap();
        let bytes = write_checkpoint(&params, cfg.hash64()).unwrap();
        let (back, h) = read_checkpoint(&bytes, Some(cfg.hash64())).unwrap();
        assert_eq!(back, params);
        assert_eq!(h, cfg.hash64());

        assert!(matches!(read_checkpoint(&bytes, Some(1)), Err(Error::VersionMismatch(_))));
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3], None), Err(Error::CorruptRecord(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(read_checkpoint(&bad, None), Err(Error::VersionMismatch(_))));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&p, &params, 5).unwrap();
        assert_eq!(load_checkpoint(&p, None).unwrap().0, params);
    }
}
