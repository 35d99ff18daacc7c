//! Initial-field predictors (the frozen backbone slot).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::field::{compose, upsample_field, warp, DisplacementField};
use crate::scalar::Scalar;
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationalParams {
    pub levels: usize,
    pub iters: usize,
    /// Largest per-iteration displacement change, in voxels of the current level.
    pub step: f64,
    pub smooth_sigma: f64,
    pub lambda: f64,
    pub window: usize,
}

impl Default for VariationalParams {
    fn default() -> Self {
        VariationalParams { levels: 3, iters: 30, step: 0.25, smooth_sigma: 2.0, lambda: 0.1, window: 9 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSpec {
    #[default]
    Zero,
    File {
        path: PathBuf,
    },
    Variational(VariationalParams),
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if let BackboneSpec::Variational(p) = self {
            if p.levels == 0 || p.iters == 0 || !(p.step > 0.0) || !(p.smooth_sigma > 0.0) || !(p.lambda >= 0.0) {
                return Err(Error::invalid(format!("variational backbone parameters must be positive: {p:?}")));
            }
            if p.window % 2 == 0 {
                return Err(Error::invalid(format!("variational window must be odd, got {}", p.window)));
            }
        }
        Ok(())
    }
}

/// Predicts `phi0` for the pair `(moving, fixed)`.
pub fn backbone_predict<T: Scalar>(spec: &BackboneSpec, moving: &Volume<T>, fixed: &Volume<T>) -> Result<DisplacementField<T>> {
    spec.validate()?;
    let dims = moving.dims();
    if fixed.dims() != dims {
        return Err(Error::shape(format!("backbone: {dims:?} vs {:?}", fixed.dims())));
    }
    let u = match spec {
        BackboneSpec::Zero => DisplacementField::zeros(dims),
        BackboneSpec::File { path } => {
            let u = crate::vol_io::load_field::<T>(path)?;
            if u.dims() != dims {
                return Err(Error::shape(format!("backbone field {:?} does not match images {dims:?}", u.dims())));
            }
            return Ok(u);
        }
        BackboneSpec::Variational(p) => variational(p, moving, fixed)?,
    };
    Ok(u.with_spacing(moving.spacing()))
}

/// Coarse-to-fine normalized gradient descent on a displacement field.
fn variational<T: Scalar>(p: &VariationalParams, moving: &Volume<T>, fixed: &Volume<T>) -> Result<DisplacementField<T>> {
    let dims = moving.dims();
    let radius = (2.0 * p.smooth_sigma).ceil() as usize;
    let mut u: Option<DisplacementField<T>> = None;
    for level in (0..p.levels).rev() {
        let factor = 1usize << level;
        let mut tape = Tape::<T>::new();
        let a = tape.constant(moving.to_tensor());
        let b = tape.constant(fixed.to_tensor());
        let (a, b) = if factor > 1 { (tape.avg_pool(a, factor)?, tape.avg_pool(b, factor)?) } else { (a, b) };
        let (a_t, b_t) = (tape.value(a).clone(), tape.value(b).clone());
        let level_dims = a_t.spatial();
        let mut cur = match u.take() {
            None => DisplacementField::zeros(level_dims),
            Some(prev) => upsample_field(&prev, level_dims)?,
        };
        for _ in 0..p.iters {
            let mut tape = Tape::<T>::new();
            let a = tape.constant(a_t.clone());
            let b = tape.constant(b_t.clone());
            let uv = tape.param(cur.to_tensor());
            let w = tape.warp(a, uv)?;
            let sim = tape.lncc(w, b, p.window)?;
            let reg = tape.diffusion_reg(uv)?;
            let reg = tape.scale(reg, p.lambda);
            let nsim = tape.neg(sim);
            let loss = tape.add(nsim, reg)?;
            if !tape.value(loss).is_finite() {
                return Err(Error::NonFinite("variational backbone loss".into()));
            }
            let mut grads = tape.backward(loss)?;
            let g = grads.take_or_zeros(uv, tape.shape(uv));
            if !g.is_finite() {
                return Err(Error::NonFinite("variational backbone gradient".into()));
            }
            let gmax = g.max_abs().as_f64();
            if gmax == 0.0 {
                break;
            }
            let k = T::lit(p.step / gmax);
            let mut next = cur.to_tensor();
            for (x, gv) in next.data_mut().iter_mut().zip(g.data()) {
                *x -= k * *gv;
            }
            let mut tape = Tape::<T>::new();
            let n = tape.constant(next);
            let s = tape.gaussian_filter(n, radius, p.smooth_sigma);
            cur = DisplacementField::from_tensor(tape.value(s))?;
        }
        u = Some(cur);
    }
    let u = u.expect("at least one level");
    if u.dims() == dims {
        Ok(u)
    } else {
        upsample_field(&u, dims)
    }
}

/// `phi <- compose(phi, f(I_A ∘ phi, I_B))`, `k` times.
pub fn iterate_backbone<T: Scalar>(spec: &BackboneSpec, moving: &Volume<T>, fixed: &Volume<T>, k: usize) -> Result<DisplacementField<T>> {
    if k == 0 {
        return Err(Error::invalid("iterate_backbone needs k >= 1"));
    }
    let mut phi = backbone_predict(spec, moving, fixed)?;
    for _ in 1..k {
        let warped = warp(moving, &phi)?;
        let step = backbone_predict(spec, &warped, fixed)?;
        phi = compose(&phi, &step)?;
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::endpoint_error;
    use crate::synth::{synth_problem, Contrast};

    #[test]
    fn zero_and_file_kinds() {
        let p = synth_problem::<f32>(0, [12, 12, 12], 0.3, Contrast::Identity).unwrap();
        let z = backbone_predict(&BackboneSpec::Zero, &p.phantom, &p.fixed).unwrap();
        assert!(z.is_zero());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.vol");
        crate::vol_io::save_field(&p.true_field, &path).unwrap();
        let f = backbone_predict(&BackboneSpec::File { path: path.clone() }, &p.phantom, &p.fixed).unwrap();
        assert_eq!(f.data(), p.true_field.data());
        let small = Volume::<f32>::zeros([6, 6, 6]);
        assert!(backbone_predict(&BackboneSpec::File { path }, &small, &small).is_err());
        assert!(iterate_backbone(&BackboneSpec::Zero, &p.phantom, &p.fixed, 4).unwrap().is_zero());
    }

    #[test]
    fn variational_reduces_endpoint_error() {
        let p = synth_problem::<f32>(0, [48, 48, 48], 0.3, Contrast::Identity).unwrap();
        let spec = BackboneSpec::Variational(VariationalParams::default());
        let u = backbone_predict(&spec, &p.phantom, &p.fixed).unwrap();
        let zero = endpoint_error(&DisplacementField::zeros(p.phantom.dims()), &p.true_field).unwrap();
        let got = endpoint_error(&u, &p.true_field).unwrap();
        assert!(got <= 0.7 * zero, "variational {got} vs zero {zero}");
        let once = iterate_backbone(&spec, &p.phantom, &p.fixed, 1).unwrap();
        assert_eq!(once.data(), u.data());
    }
}
