//! Seeded phantom registration problems with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::field::{warp, DisplacementField};
use crate::scalar::Scalar;
use crate::volume::{LabelMap, LandmarkSet, Volume};

/// Exclusive upper bound on `max_disp`.
pub const MAX_DISP_LIMIT: f64 = 0.4;
pub const FIELD_SIGMA: f64 = 4.0;
pub const GAMMA: f64 = 2.0;
pub const N_LANDMARKS: usize = 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    #[default]
    Identity,
    /// `max(v) - v`.
    Inverted,
    /// `min + (max - min) * ((v - min) / (max - min))^2`.
    Gamma,
}

impl Contrast {
    pub fn apply<T: Scalar>(self, v: &Volume<T>) -> Volume<T> {
        let (lo, hi) = v.min_max();
        match self {
            Contrast::Identity => v.clone(),
            Contrast::Inverted => v.map(|x| hi - x),
            Contrast::Gamma => {
                let range = hi - lo;
                let g = T::lit(GAMMA);
                v.map(|x| if range > T::zero() { lo + range * ((x - lo) / range).powf(g) } else { x })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthProblem<T> {
    /// Moving image.
    pub phantom: Volume<T>,
    pub labels: LabelMap,
    /// Aligns `fixed` to `phantom`: `fixed = phantom ∘ (x + true_field)`.
    pub true_field: DisplacementField<T>,
    /// `contrast` applied to `phantom`.
    pub remapped: Volume<T>,
    pub contrast: Contrast,
    pub fixed: Volume<T>,
    pub fixed_labels: LabelMap,
    /// Moving-space points paired with fixed-space points, in mm.
    pub landmarks: LandmarkSet,
    pub seed: u64,
}

/// Three nested ellipsoid shells plus a smooth multi-band texture.
struct Phantom {
    center: [f64; 3],
    radii: [[f64; 3]; 3],
    levels: [f64; 4],
    waves: Vec<([f64; 3], f64, f64)>,
}

impl Phantom {
    fn new(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let half = dims.map(|d| d as f64 / 2.0);
        let center = [0, 1, 2].map(|a| half[a] - 0.5 + rng.gen_range(-0.05..0.05) * dims[a] as f64);
        let shells = [0.78, 0.55, 0.32];
        let radii = shells.map(|s| [0, 1, 2].map(|a| half[a] * s * rng.gen_range(0.9..1.1)));
        let levels = [0.0, 0.35, 0.65, 1.0];
        // (wavevector, phase, amplitude). Broad bands keep low-resolution windows
        // textured; three orthogonal fine bands make every displacement
        // component observable under local affine-invariant similarity.
        let mut waves = Vec::new();
        let mut dirs: Vec<[f64; 3]> = Vec::new();
        for _ in 0..3 {
            let mut k: [f64; 3] = [0, 1, 2].map(|_| rng.sample::<f64, _>(StandardNormal));
            for d in &dirs {
                let dot: f64 = (0..3).map(|a| k[a] * d[a]).sum();
                k = [0, 1, 2].map(|a| k[a] - dot * d[a]);
            }
            let norm = k.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            dirs.push(k.map(|x| x / norm));
        }
        let mut band = |dir: [f64; 3], wavelength: f64, amp: f64, rng: &mut ChaCha8Rng| {
            let scale = std::f64::consts::TAU / (wavelength * rng.gen_range(0.9..1.1));
            waves.push((dir.map(|x| x * scale), rng.gen_range(0.0..std::f64::consts::TAU), amp));
        };
        band(dirs[0], 24.0, 0.08, rng);
        band(dirs[1], 16.0, 0.06, rng);
        for &d in &dirs {
            band(d, 6.0, 0.04, rng);
        }
        Phantom { center, radii, levels, waves }
    }

    fn radius(&self, shell: usize, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[shell][a]).powi(2)).sum::<f64>().sqrt()
    }

    fn label(&self, p: [f64; 3]) -> i32 {
        (0..3).rev().find(|&s| self.radius(s, p) < 1.0).map_or(0, |s| s as i32 + 1)
    }

    fn intensity(&self, p: [f64; 3]) -> f64 {
        let mut v = self.levels[0];
        for s in 0..3 {
            let edge = (1.0 - self.radius(s, p)) * self.radii[s].iter().cloned().fold(f64::INFINITY, f64::min);
            let step = 1.0 / (1.0 + (-edge / 0.75).exp());
            v += (self.levels[s + 1] - self.levels[s]) * step;
        }
        for (k, phase, amp) in &self.waves {
            v += amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin();
        }
        v
    }
}

/// Gaussian-smoothed white noise rescaled so the largest component magnitude is `max_disp`.
pub fn smooth_random_field(dims: [usize; 3], sigma: f64, max_disp: f64, rng: &mut ChaCha8Rng) -> Result<DisplacementField<f64>> {
    let n: usize = dims.iter().product();
    let noise = crate::autodiff::Tensor::from_fn([1, 3, dims[0], dims[1], dims[2]], |_| rng.sample::<f64, _>(StandardNormal));
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(noise);
    let radius = (3.0 * sigma).ceil() as usize;
    let s = tape.gaussian_filter(x, radius, sigma);
    let mut u = DisplacementField::from_tensor(tape.value(s))?;
    let peak = u.max_abs();
    if peak <= 0.0 || n == 0 {
        return Err(Error::invalid("degenerate random field"));
    }
    let k = max_disp / peak;
    for c in 0..3 {
        u.component_mut(c).iter_mut().for_each(|v| *v *= k);
    }
    Ok(u)
}

pub fn synth_problem<T: Scalar>(seed: u64, dims: [usize; 3], max_disp: f64, contrast: Contrast) -> Result<SynthProblem<T>> {
    if !(max_disp >= 0.0 && max_disp < MAX_DISP_LIMIT) {
        return Err(Error::invalid(format!("max_disp must lie in [0, {MAX_DISP_LIMIT}), got {max_disp}")));
    }
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::invalid(format!("synthetic dims must be at least 8 per axis, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ph = Phantom::new(dims, &mut rng);
    let spacing = [1.0; 3];
    let phantom = Volume::<f64>::from_fn(dims, spacing, |d, h, w| ph.intensity([d as f64, h as f64, w as f64]));
    let mut lab = Vec::with_capacity(phantom.len());
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                lab.push(ph.label([d as f64, h as f64, w as f64]));
            }
        }
    }
    let labels = LabelMap::new(dims, spacing, lab)?;
    let true_field = if max_disp == 0.0 {
        DisplacementField::zeros(dims)
    } else {
        smooth_random_field(dims, FIELD_SIGMA, max_disp, &mut rng)?
    };
    let fixed = warp(&phantom, &true_field)?;
    // Fixed labels come from the continuous anatomy, not from resampling voxel labels.
    let mut fl = Vec::with_capacity(phantom.len());
    let n = phantom.len();
    let comps = [0, 1, 2].map(|c| &true_field.data()[c * n..(c + 1) * n]);
    let mut i = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let x = [d as f64 + comps[0][i], h as f64 + comps[1][i], w as f64 + comps[2][i]];
                fl.push(ph.label(x));
                i += 1;
            }
        }
    }
    let fixed_labels = LabelMap::new(dims, spacing, fl)?;

    let mut q = Vec::with_capacity(N_LANDMARKS);
    let mut p = Vec::with_capacity(N_LANDMARKS);
    let margin = dims.map(|d| d / 8);
    while q.len() < N_LANDMARKS {
        let pos = [0, 1, 2].map(|a| rng.gen_range(margin[a]..dims[a] - margin[a]));
        let u = true_field.at(pos[0], pos[1], pos[2]);
        q.push([0, 1, 2].map(|a| pos[a] as f64 * spacing[a]));
        p.push([0, 1, 2].map(|a| (pos[a] as f64 + u[a]) * spacing[a]));
    }
    let landmarks = LandmarkSet::new(p, q)?;

    let phantom = phantom.cast::<T>();
    let remapped = contrast.apply(&phantom);
    Ok(SynthProblem {
        remapped,
        contrast,
        fixed: fixed.cast(),
        fixed_labels,
        landmarks,
        labels,
        true_field: true_field.cast(),
        phantom,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ndv;

    #[test]
    fn deterministic_in_seed() {
        let a = synth_problem::<f32>(3, [16, 16, 16], 0.3, Contrast::Gamma).unwrap();
        let b = synth_problem::<f32>(3, [16, 16, 16], 0.3, Contrast::Gamma).unwrap();
        assert_eq!(a.phantom.data(), b.phantom.data());
        assert_eq!(a.true_field.data(), b.true_field.data());
        assert_eq!(a.remapped.data(), b.remapped.data());
        assert_eq!(a.landmarks, b.landmarks);
        let c = synth_problem::<f32>(4, [16, 16, 16], 0.3, Contrast::Gamma).unwrap();
        assert_ne!(a.phantom.data(), c.phantom.data());
    }

    #[test]
    fn contrast_maps() {
        let p = synth_problem::<f64>(1, [16, 16, 16], 0.3, Contrast::Identity).unwrap();
        assert_eq!(p.remapped.data(), p.phantom.data());
        let inv = Contrast::Inverted.apply(&p.phantom);
        let hi = p.phantom.min_max().1;
        assert!(inv.data().iter().zip(p.phantom.data()).all(|(r, v)| *r == hi - *v));
        let g = Contrast::Gamma.apply(&p.phantom);
        let mut pairs: Vec<(f64, f64)> = p.phantom.data().iter().cloned().zip(g.data().iter().cloned()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[1].1 >= w[0].1));
    }

    #[test]
    fn field_bound_and_classes() {
        let p = synth_problem::<f64>(9, [32, 32, 32], 0.3, Contrast::Identity).unwrap();
        assert!((p.true_field.max_abs() - 0.3).abs() < 1e-12);
        assert_eq!(ndv(&p.true_field).unwrap(), 0.0);
        assert_eq!(p.labels.classes(), vec![1, 2, 3]);
        assert!(synth_problem::<f64>(9, [16, 16, 16], 0.4, Contrast::Identity).is_err());
        assert!(synth_problem::<f64>(9, [16, 16, 16], -0.1, Contrast::Identity).is_err());
    }

    #[test]
    fn fixed_image_is_warped_phantom() {
        let p = synth_problem::<f64>(2, [16, 16, 16], 0.3, Contrast::Identity).unwrap();
        let w = warp(&p.phantom, &p.true_field).unwrap();
        assert_eq!(w.data(), p.fixed.data());
        for (pm, qf) in p.landmarks.moving().iter().zip(p.landmarks.fixed()) {
            let u = p.true_field.sample(*qf);
            assert!((0..3).all(|a| (qf[a] + u[a] - pm[a]).abs() < 1e-12));
        }
    }
}
