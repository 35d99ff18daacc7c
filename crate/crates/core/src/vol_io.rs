//! `.vol` files: a raw little-endian payload plus a `<name>.vol.json` manifest
//! `{"dims":[D,H,W],"spacing":[sd,sh,sw],"kind":"volume|labels|field"}`.
//!
//! Volumes and fields are `f32`, labels `i32`. Fields are component-major.
//! Landmarks are CSV lines `pd,ph,pw,qd,qh,qw` in millimeters.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::scalar::Scalar;
use crate::volume::{LabelMap, LandmarkSet, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolKind {
    Volume,
    Labels,
    Field,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolManifest {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub kind: VolKind,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_manifest(path: &Path) -> Result<VolManifest> {
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))
}

fn write_pair(path: &Path, manifest: &VolManifest, payload: &[u8]) -> Result<()> {
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let mp = manifest_path(path);
    let text = serde_json::to_string(manifest).expect("manifest serializes");
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

/// Reads the manifest and 4-byte words, checking kind and element count.
fn read_words(path: &Path, kind: VolKind, per_voxel: usize) -> Result<(VolManifest, Vec<[u8; 4]>)> {
    let manifest = read_manifest(path)?;
    if manifest.kind != kind {
        return Err(Error::format(path, format!("expected kind {kind:?}, manifest says {:?}", manifest.kind)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = per_voxel * manifest.dims.iter().product::<usize>();
    if bytes.len() != 4 * want {
        return Err(Error::format(
            path,
            format!("dims {:?} need {} values, payload holds {} bytes", manifest.dims, want, bytes.len()),
        ));
    }
    let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    Ok((manifest, words))
}

fn floats<T: Scalar>(path: &Path, words: Vec<[u8; 4]>) -> Result<Vec<T>> {
    let data: Vec<f32> = words.into_iter().map(f32::from_le_bytes).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, format!("non-finite value at element {i}")));
    }
    Ok(data.into_iter().map(|v| T::lit(v as f64)).collect())
}

fn float_payload<T: Scalar>(data: &[T]) -> Vec<u8> {
    data.iter().flat_map(|v| v.as_f32().to_le_bytes()).collect()
}

pub fn load_volume<T: Scalar>(path: &Path) -> Result<Volume<T>> {
    let (m, words) = read_words(path, VolKind::Volume, 1)?;
    Volume::new(m.dims, m.spacing, floats(path, words)?)
}

pub fn save_volume<T: Scalar>(v: &Volume<T>, path: &Path) -> Result<()> {
    let m = VolManifest { dims: v.dims(), spacing: v.spacing(), kind: VolKind::Volume };
    write_pair(path, &m, &float_payload(v.data()))
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let (m, words) = read_words(path, VolKind::Labels, 1)?;
    LabelMap::new(m.dims, m.spacing, words.into_iter().map(i32::from_le_bytes).collect())
}

pub fn save_labels(l: &LabelMap, path: &Path) -> Result<()> {
    let m = VolManifest { dims: l.dims(), spacing: l.spacing(), kind: VolKind::Labels };
    let payload: Vec<u8> = l.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, &m, &payload)
}

pub fn load_field<T: Scalar>(path: &Path) -> Result<DisplacementField<T>> {
    let (m, words) = read_words(path, VolKind::Field, 3)?;
    DisplacementField::new(m.dims, m.spacing, floats(path, words)?)
}

pub fn save_field<T: Scalar>(u: &DisplacementField<T>, path: &Path) -> Result<()> {
    let m = VolManifest { dims: u.dims(), spacing: u.spacing(), kind: VolKind::Field };
    write_pair(path, &m, &float_payload(u.data()))
}

pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut moving, mut fixed) = (Vec::new(), Vec::new());
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 6 {
            return Err(Error::format(path, format!("line {}: expected 6 values, got {}", lineno + 1, vals.len())));
        }
        moving.push([vals[0], vals[1], vals[2]]);
        fixed.push([vals[3], vals[4], vals[5]]);
    }
    LandmarkSet::new(moving, fixed)
}

pub fn save_landmarks(l: &LandmarkSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (p, q) in l.moving().iter().zip(l.fixed()) {
        writeln!(out, "{},{},{},{},{},{}", p[0], p[1], p[2], q[0], q[1], q[2]).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.vol");
        let v = Volume::<f32>::from_fn([4, 4, 4], [1.0, 1.5, 2.0], |d, h, w| (d * 16 + h * 4 + w) as f32);
        save_volume(&v, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back: Volume<f32> = load_volume(&path).unwrap();
        assert_eq!(back, v);
        save_volume(&back, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn x_fastest_byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.vol");
        let v = Volume::<f32>::from_fn([2, 2, 2], [1.0; 3], |d, h, w| if (d, h, w) == (0, 0, 1) { 1.5 } else { 0.0 });
        save_volume(&v, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(f32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1.5);
    }

    #[test]
    fn size_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vol");
        fs::write(&path, vec![0u8; 7 * 4]).unwrap();
        fs::write(manifest_path(&path), r#"{"dims":[2,2,2],"spacing":[1,1,1],"kind":"volume"}"#).unwrap();
        assert!(matches!(load_volume::<f32>(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_manifest_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.vol");
        fs::write(&path, 1.0f32.to_le_bytes()).unwrap();
        assert!(matches!(load_volume::<f32>(&path), Err(Error::Io { .. })));
        fs::write(manifest_path(&path), r#"{"dims":[1,1,1],"spacing":[1,1,1],"kind":"volume"}"#).unwrap();
        fs::write(&path, f32::NAN.to_le_bytes()).unwrap();
        assert!(load_volume::<f32>(&path).is_err());
    }

    #[test]
    fn brain_sized_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.vol");
        let dims = [160, 224, 192];
        fs::write(&path, vec![0u8; 4 * dims.iter().product::<usize>()]).unwrap();
        fs::write(manifest_path(&path), r#"{"dims":[160,224,192],"spacing":[1.0,1.0,1.0],"kind":"volume"}"#).unwrap();
        let v: Volume<f32> = load_volume(&path).unwrap();
        assert_eq!(v.dims(), dims);
    }

    #[test]
    fn labels_fields_and_landmarks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lp = dir.path().join("l.vol");
        let labels = LabelMap::new([2, 3, 2], [1.0; 3], (0..12).map(|i| i % 4).collect()).unwrap();
        save_labels(&labels, &lp).unwrap();
        assert_eq!(load_labels(&lp).unwrap(), labels);
        assert!(load_volume::<f32>(&lp).is_err());

        let fp = dir.path().join("f.vol");
        let u = DisplacementField::<f32>::from_fn([2, 2, 3], |d, h, w| [d as f32, -(h as f32), w as f32 * 0.5]);
        save_field(&u, &fp).unwrap();
        let bytes = fs::read(&fp).unwrap();
        // component-major: first 12 floats are u_d
        assert_eq!(f32::from_le_bytes(bytes[6 * 4..7 * 4].try_into().unwrap()), 1.0);
        assert_eq!(load_field::<f32>(&fp).unwrap(), u);

        let cp = dir.path().join("lm.csv");
        let lm = LandmarkSet::new(vec![[1.0, 2.0, 3.5]], vec![[0.0, -1.0, 2.25]]).unwrap();
        save_landmarks(&lm, &cp).unwrap();
        assert_eq!(load_landmarks(&cp).unwrap(), lm);
    }
}
