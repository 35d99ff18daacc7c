//! Contrast normalization applied when the modality gate fires.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{gate_lncc, GateParams};
use crate::scalar::Scalar;
use crate::vol_io::{load_volume, save_volume};
use crate::volume::Volume;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StyleTransferSpec {
    Identity,
    /// Quantile mapping onto a reference volume (the fixed image when unset).
    #[default]
    MonotoneRemap,
    MonotoneRemapFile {
        reference: PathBuf,
    },
    /// `argv` with `{in}` and `{out}` placeholders naming `.vol` files.
    ExternalCommand {
        argv: Vec<String>,
    },
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Global Pearson correlation of two volumes, resampling `b` onto `a`'s grid if needed.
pub fn global_ncc<T: Scalar>(a: &Volume<T>, b: &Volume<T>) -> Result<f64> {
    let bv: Vec<f64> = if a.dims() == b.dims() {
        b.data().iter().map(|x| x.as_f64()).collect()
    } else {
        let mut tape = Tape::<T>::new();
        let x = tape.constant(b.to_tensor());
        let r = tape.trilinear_resize(x, a.dims())?;
        tape.value(r).data().iter().map(|x| x.as_f64()).collect()
    };
    let av: Vec<f64> = a.data().iter().map(|x| x.as_f64()).collect();
    Ok(pearson(&av, &bv))
}

/// Histogram matching of `v` onto `reference` by monotone quantile mapping.
///
/// When `v` correlates negatively with the reference it is flipped first.
pub fn monotone_remap<T: Scalar>(v: &Volume<T>, reference: &Volume<T>) -> Result<Volume<T>> {
    let (lo, hi) = v.min_max();
    if lo == hi {
        return Err(Error::invalid("monotone_remap of a constant volume"));
    }
    let flip = global_ncc(v, reference)? < 0.0;
    let vals: Vec<f64> = v.data().iter().map(|x| if flip { -x.as_f64() } else { x.as_f64() }).collect();
    let mut refs: Vec<f64> = reference.data().iter().map(|x| x.as_f64()).collect();
    refs.sort_by(f64::total_cmp);
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
    let m = refs.len();
    let lookup = |q: f64| {
        let pos = q * (m - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(m - 1);
        refs[lo] + (pos - lo as f64) * (refs[hi] - refs[lo])
    };
    let mut out = vec![T::zero(); n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && vals[order[end]] == vals[order[start]] {
            end += 1;
        }
        // Tied values share their mid-rank quantile.
        let mid = (start + end - 1) as f64 / 2.0;
        let q = if n > 1 { mid / (n - 1) as f64 } else { 0.5 };
        let mapped = T::lit(lookup(q));
        for &i in &order[start..end] {
            out[i] = mapped;
        }
        start = end;
    }
    Volume::new(v.dims(), v.spacing(), out)
}

fn run_external<T: Scalar>(argv: &[String], v: &Volume<T>) -> Result<Volume<T>> {
    let Some((prog, rest)) = argv.split_first() else {
        return Err(Error::invalid("external style command is empty"));
    };
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let input = dir.path().join("in.vol");
    let output = dir.path().join("out.vol");
    save_volume(v, &input)?;
    let fill = |s: &str| s.replace("{in}", &input.to_string_lossy()).replace("{out}", &output.to_string_lossy());
    let status = Command::new(fill(prog)).args(rest.iter().map(|a| fill(a))).status().map_err(|e| Error::io(Path::new(prog), e))?;
    if !status.success() {
        return Err(Error::External(format!("style command {prog} exited with {status}")));
    }
    let out = load_volume::<T>(&output)?;
    if out.dims() != v.dims() {
        return Err(Error::shape(format!("style command wrote {:?}, expected {:?}", out.dims(), v.dims())));
    }
    Ok(out)
}

/// Applies the style transfer to one volume.
pub fn apply_style<T: Scalar>(spec: &StyleTransferSpec, v: &Volume<T>, default_reference: &Volume<T>) -> Result<Volume<T>> {
    match spec {
        StyleTransferSpec::Identity => Ok(v.clone()),
        StyleTransferSpec::MonotoneRemap => monotone_remap(v, default_reference),
        StyleTransferSpec::MonotoneRemapFile { reference } => monotone_remap(v, &load_volume::<T>(reference)?),
        StyleTransferSpec::ExternalCommand { argv } => run_external(argv, v),
    }
}

#[derive(Clone, Debug)]
pub struct Preprocessed<T> {
    pub moving: Volume<T>,
    pub fixed: Volume<T>,
    pub fired: bool,
    /// Low-resolution LNCC that drove the decision.
    pub gate_lncc: f64,
}

/// Routes the pair through style transfer when the modality gate fires.
pub fn gated_preprocess<T: Scalar>(moving: &Volume<T>, fixed: &Volume<T>, style: &StyleTransferSpec, gate: &GateParams) -> Result<Preprocessed<T>> {
    let value = gate_lncc(moving, fixed, gate)?;
    let fired = value < gate.tau;
    if !fired {
        return Ok(Preprocessed { moving: moving.clone(), fixed: fixed.clone(), fired, gate_lncc: value });
    }
    let a = apply_style(style, moving, fixed)?;
    let b = apply_style(style, fixed, fixed)?;
    if a.dims() != moving.dims() || b.dims() != fixed.dims() {
        return Err(Error::shape("style transfer changed volume dims"));
    }
    Ok(Preprocessed { moving: a, fixed: b, fired, gate_lncc: value })
}
