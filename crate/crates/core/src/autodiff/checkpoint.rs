//! Named parameter sets and their on-disk checkpoint format.
//!
//! A checkpoint is a raw little-endian `f32` payload plus a `<path>.json`
//! manifest with one `(name, shape, offset)` entry per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "regadapt-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 5],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config_hash: String,
    #[serde(default)]
    pub tags: BTreeMap<String, serde_json::Value>,
    pub params: Vec<ParamEntry>,
}

/// SHA-256 of the compact JSON encoding of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("json value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &[(String, &Tensor<T>)],
    config: &serde_json::Value,
    tags: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params {
        entries.push(ParamEntry { name: name.clone(), shape: t.shape(), offset: payload.len() as u64 });
        for v in t.data() {
            payload.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config_hash: config_hash(config),
        tags,
        params: entries,
    };
    fs::write(path, &payload).map_err(|e| Error::io(path, e))?;
    let mp = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor<T>)>)> {
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&mp, format!("unknown format {:?}", manifest.format)));
    }
    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::format(path, format!("parameter {} exceeds payload", e.name)))?;
        let data: Vec<T> = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("parameter {} has non-finite values", e.name)));
        }
        out.push((e.name.clone(), Tensor::new(e.shape, data)?));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let a = Tensor::<f32>::from_fn([2, 1, 1, 1, 3], |i| i as f32 * 0.25 - 1.0);
        let b = Tensor::<f32>::from_fn([1, 2, 1, 1, 1], |i| i as f32 + 0.5);
        let cfg = serde_json::json!({"base_channels": 8});
        let mut tags = BTreeMap::new();
        tags.insert("variant".into(), serde_json::json!("cascade"));
        save_checkpoint(&path, &[("a".into(), &a), ("b".into(), &b)], &cfg, tags).unwrap();
        let (m, params) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(m.params[1].offset, 24);
        assert_eq!(m.config_hash, config_hash(&cfg));
        assert_eq!(m.tags["variant"], "cascade");
        assert_eq!(params[0].1, a);
        assert_eq!(params[1].1, b);
    }
}
