//! Checkpoint container: a JSON manifest followed by one little-endian
//! f64 blob, in a single file.
//!
//! Layout: `[u64 LE manifest length][manifest JSON][blob]`. The manifest
//! carries a `format` field (`catrinet-ckpt-v1`), per-parameter
//! `{name, shape, byte_offset}` entries (offsets relative to the blob),
//! and whatever model metadata the caller attaches.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::store::ParamStore;

pub const CKPT_FORMAT: &str = "catrinet-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn save(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, p) in store.iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: vec![p.rows, p.cols],
            byte_offset: blob.len() as u64,
        });
        for v in &p.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CKPT_FORMAT.to_string(),
        meta,
        params: entries,
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + mjson.len() + blob.len());
    out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&mjson);
    out.extend_from_slice(&blob);
    fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Parse(format!("{}: truncated checkpoint header", path.display())));
    }
    let mlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + mlen {
        return Err(Error::Parse(format!("{}: truncated manifest", path.display())));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + mlen])
        .map_err(|e| Error::Parse(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.format != CKPT_FORMAT {
        return Err(Error::Incompatible(format!(
            "{}: format '{}' (expected '{CKPT_FORMAT}')",
            path.display(),
            manifest.format
        )));
    }
    let blob = &bytes[8 + mlen..];
    let mut store = ParamStore::new();
    for e in &manifest.params {
        if e.shape.len() != 2 {
            return Err(Error::Parse(format!("param {}: shape must have 2 extents", e.name)));
        }
        let (rows, cols) = (e.shape[0], e.shape[1]);
        let n = rows * cols;
        let start = e.byte_offset as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::Parse(format!("param {}: blob range out of bounds", e.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&e.name, data, rows, cols);
    }
    Ok((store, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut store = ParamStore::new();
        store.insert("b.w", vec![1.5, -2.25, 1e-300, 0.1], 2, 2);
        store.insert("a.v", vec![f64::MIN_POSITIVE, 3.0], 1, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &store, serde_json::json!({"tag": 7})).unwrap();
        let (loaded, meta) = load(&p).unwrap();
        assert_eq!(meta["tag"], 7);
        assert_eq!(loaded.len(), 2);
        for (name, param) in store.iter() {
            let l = loaded.get(name);
            assert_eq!(l.data, param.data);
            assert_eq!((l.rows, l.cols), (param.rows, param.cols));
        }
    }

    #[test]
    fn rejects_unknown_format() {
        let mut store = ParamStore::new();
        store.insert("w", vec![0.0], 1, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &store, serde_json::Value::Null).unwrap();
        // Corrupt the format field.
        let mut bytes = std::fs::read(&p).unwrap();
        let mlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let manifest = String::from_utf8(bytes[8..8 + mlen].to_vec()).unwrap();
        let bad = manifest.replace(CKPT_FORMAT, "catrinet-ckpt-v9");
        bytes.splice(8..8 + mlen, bad.into_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(Error::Incompatible(_))));
    }
}
