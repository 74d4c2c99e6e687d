//! Checkpoint directories: `manifest.json` describing every array plus
//! `weights.bin` holding raw little-endian `f32` values in manifest order.
//!
//! ```text
//! {
//!   "format": "ageprog-checkpoint-v1",
//!   "meta": { ... },
//!   "arrays": { "<name>": { "shape": [..], "dtype": "f32", "byte_offset": N }, ... }
//! }
//! ```
//!
//! Arrays are keyed and laid out in lexicographic name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{ParamSet, ParamTensor};

pub const FORMAT: &str = "ageprog-checkpoint-v1";
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

pub fn save(dir: &Path, meta: &serde_json::Value, sets: &[&ParamSet<f32>]) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let mut by_name: BTreeMap<&str, &ParamTensor<f32>> = BTreeMap::new();
    for t in sets.iter().flat_map(|s| &s.tensors) {
        if by_name.insert(&t.name, t).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate array `{}`", t.name)));
        }
    }
    let mut arrays = BTreeMap::new();
    let mut blob = Vec::new();
    for (name, t) in by_name {
        arrays.insert(name.to_string(), ArrayEntry { shape: t.shape.clone(), dtype: "f32".into(), byte_offset: blob.len() as u64 });
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { format: FORMAT.into(), meta: meta.clone(), arrays };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    std::fs::write(dir.join(WEIGHTS), blob)?;
    std::fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(())
}

/// Reads a checkpoint back; arrays come out in name order.
pub fn load(dir: &Path) -> Result<(serde_json::Value, Vec<ParamTensor<f32>>), CheckpointError> {
    let corrupt = |m: String| CheckpointError::Corrupt(m);
    let text = std::fs::read_to_string(dir.join(MANIFEST)).map_err(|e| corrupt(format!("{}: {e}", MANIFEST)))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(corrupt(format!("unknown format `{}`", manifest.format)));
    }
    let blob = std::fs::read(dir.join(WEIGHTS)).map_err(|e| corrupt(format!("{}: {e}", WEIGHTS)))?;
    let mut expected_offset = 0u64;
    let mut out = Vec::with_capacity(manifest.arrays.len());
    for (name, entry) in &manifest.arrays {
        if entry.dtype != "f32" {
            return Err(corrupt(format!("array `{name}` has dtype `{}`", entry.dtype)));
        }
        if entry.byte_offset != expected_offset {
            return Err(corrupt(format!("array `{name}` starts at byte {}, expected {expected_offset}", entry.byte_offset)));
        }
        let count: usize = entry.shape.iter().product();
        let end = expected_offset as usize + 4 * count;
        let bytes = blob.get(expected_offset as usize..end).ok_or_else(|| corrupt(format!("weights truncated inside `{name}`")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(ParamTensor { name: name.clone(), shape: entry.shape.clone(), data });
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(corrupt(format!("weights hold {} bytes, manifest describes {expected_offset}", blob.len())));
    }
    Ok((manifest.meta, out))
}

/// Restores one stack's arrays from a loaded list, checking names and shapes.
pub fn take_set(arrays: &mut Vec<ParamTensor<f32>>, layout: &[(String, Vec<usize>)]) -> Result<ParamSet<f32>, CheckpointError> {
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let pos = arrays
            .iter()
            .position(|t| &t.name == name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing array `{name}`")))?;
        let t = arrays.swap_remove(pos);
        if &t.shape != shape {
            return Err(CheckpointError::Corrupt(format!("array `{name}` has shape {:?}, expected {shape:?}", t.shape)));
        }
        tensors.push(t);
    }
    Ok(ParamSet { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        ParamSet {
            tensors: vec![
                ParamTensor { name: "b.w".into(), shape: vec![2, 2], data: vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-7] },
                ParamTensor { name: "a.w".into(), shape: vec![3], data: vec![0.1, 0.2, 0.3] },
            ],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample();
        save(dir.path(), &serde_json::json!({"k": 1}), &[&set]).unwrap();
        let (meta, mut arrays) = load(dir.path()).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(arrays[0].name, "a.w");
        let back = take_set(&mut arrays, &[("b.w".into(), vec![2, 2]), ("a.w".into(), vec![3])]).unwrap();
        for (x, y) in set.tensors.iter().zip(&back.tensors) {
            assert_eq!(x.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(manifest.arrays["a.w"].byte_offset, 0);
        assert_eq!(manifest.arrays["b.w"].byte_offset, 12);
    }

    #[test]
    fn detects_damage() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &serde_json::Value::Null, &[&sample()]).unwrap();
        let w = dir.path().join(WEIGHTS);
        let bytes = std::fs::read(&w).unwrap();
        std::fs::write(&w, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Corrupt(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&w, &longer).unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Corrupt(_))));
        std::fs::write(&w, &bytes).unwrap();
        std::fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Corrupt(_))));
        let mut arrays = vec![ParamTensor { name: "x".into(), shape: vec![2], data: vec![0.0; 2] }];
        assert!(take_set(&mut arrays, &[("x".into(), vec![3])]).is_err());
    }
}
