//! Displacement fields: `phi(x) = x + u(x)`, with `u` in voxel units of its grid.
//!
//! Warping is backward: `warp(v, u)(x) = v(x + u(x))`, sampled trilinearly
//! with clamp-to-edge borders.

use crate::autodiff::spatial::scaled_dims;
use crate::autodiff::tape::{Backward, Tape, Var};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{check_grid, Volume};

/// Per-voxel 3-vector field stored component-major (`u_d`, then `u_h`, then `u_w`).
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

impl<T: Scalar> DisplacementField<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        check_grid(dims, spacing, data.len() / 3)?;
        if data.len() % 3 != 0 {
            return Err(Error::shape("field payload is not a multiple of 3"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(DisplacementField { dims, spacing, data })
    }

    /// The identity transform.
    pub fn zeros(dims: [usize; 3]) -> Self {
        DisplacementField { dims, spacing: [1.0; 3], data: vec![T::zero(); 3 * dims.iter().product::<usize>()] }
    }

    pub fn constant(dims: [usize; 3], u: [T; 3]) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..3).flat_map(|c| std::iter::repeat(u[c]).take(n)).collect();
        DisplacementField { dims, spacing: [1.0; 3], data }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> [T; 3]) -> Self {
        let n: usize = dims.iter().product();
        let mut data = vec![T::zero(); 3 * n];
        let mut i = 0;
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let u = f(d, h, w);
                    for c in 0..3 {
                        data[c * n + i] = u[c];
                    }
                    i += 1;
                }
            }
        }
        DisplacementField { dims, spacing: [1.0; 3], data }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn component(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Displacement at voxel `(d, h, w)`.
    pub fn at(&self, d: usize, h: usize, w: usize) -> [T; 3] {
        let i = (d * self.dims[1] + h) * self.dims[2] + w;
        let n = self.voxels();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    /// Trilinear, border-clamped sample at a continuous voxel position.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let s = Sampler::new(self.dims, p);
        let n = self.voxels();
        [0, 1, 2].map(|c| s.value(&self.data[c * n..(c + 1) * n]).as_f64())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new([1, 3, self.dims[0], self.dims[1], self.dims[2]], self.data.clone()).expect("valid field")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s[0] != 1 || s[1] != 3 {
            return Err(Error::shape(format!("field tensor must be (1,3,D,H,W), got {s:?}")));
        }
        DisplacementField::new(t.spatial(), [1.0; 3], t.data().to_vec())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> DisplacementField<U> {
        DisplacementField {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Componentwise sum (the additive update rule).
    pub fn add(&self, other: &Self) -> Result<Self> {
        same_dims(self.dims, other.dims)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(DisplacementField { dims: self.dims, spacing: self.spacing, data })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

fn same_dims(a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("dims {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Precomputed trilinear stencil for one sample position.
#[derive(Clone, Copy, Debug)]
struct Sampler {
    lo: [usize; 3],
    hi: [usize; 3],
    frac: [f64; 3],
    /// True where the raw coordinate was outside `[0, n - 1]`.
    clamped: [bool; 3],
    dims: [usize; 3],
}

impl Sampler {
    fn new(dims: [usize; 3], p: [f64; 3]) -> Self {
        let mut s = Sampler { lo: [0; 3], hi: [0; 3], frac: [0.0; 3], clamped: [false; 3], dims };
        for a in 0..3 {
            let max = (dims[a] - 1) as f64;
            let mut x = p[a];
            if x < 0.0 || x > max {
                s.clamped[a] = true;
                x = x.clamp(0.0, max);
            }
            let lo = (x.floor() as usize).min(dims[a] - 1);
            s.lo[a] = lo;
            s.hi[a] = (lo + 1).min(dims[a] - 1);
            s.frac[a] = x - lo as f64;
        }
        s
    }

    #[inline]
    fn idx(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    /// Corner values ordered `(d, h, w)` bit-wise: index `4*dd + 2*hh + ww`.
    #[inline]
    fn corners<T: Scalar>(&self, v: &[T]) -> [T; 8] {
        let ds = [self.lo[0], self.hi[0]];
        let hs = [self.lo[1], self.hi[1]];
        let ws = [self.lo[2], self.hi[2]];
        let mut c = [T::zero(); 8];
        for (k, slot) in c.iter_mut().enumerate() {
            *slot = v[self.idx(ds[k >> 2], hs[(k >> 1) & 1], ws[k & 1])];
        }
        c
    }

    #[inline]
    fn value<T: Scalar>(&self, v: &[T]) -> T {
        let c = self.corners(v);
        let [fd, fh, fw] = self.frac.map(T::lit);
        let lerp = |a: T, b: T, t: T| a + t * (b - a);
        let c00 = lerp(c[0], c[1], fw);
        let c01 = lerp(c[2], c[3], fw);
        let c10 = lerp(c[4], c[5], fw);
        let c11 = lerp(c[6], c[7], fw);
        lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), fd)
    }

    fn weights(&self) -> [f64; 8] {
        let [fd, fh, fw] = self.frac;
        let mut w = [0.0; 8];
        for (k, slot) in w.iter_mut().enumerate() {
            let a = if k >> 2 == 1 { fd } else { 1.0 - fd };
            let b = if (k >> 1) & 1 == 1 { fh } else { 1.0 - fh };
            let c = if k & 1 == 1 { fw } else { 1.0 - fw };
            *slot = a * b * c;
        }
        w
    }

    /// Partial derivatives of the interpolant wrt the sample position.
    fn gradient<T: Scalar>(&self, v: &[T]) -> [f64; 3] {
        let c = self.corners(v).map(|x| x.as_f64());
        let [fd, fh, fw] = self.frac;
        let mut g = [0.0; 3];
        for (k, &cv) in c.iter().enumerate() {
            let (bd, bh, bw) = (k >> 2 == 1, (k >> 1) & 1 == 1, k & 1 == 1);
            let wd = if bd { fd } else { 1.0 - fd };
            let wh = if bh { fh } else { 1.0 - fh };
            let ww = if bw { fw } else { 1.0 - fw };
            let sd = if bd { 1.0 } else { -1.0 };
            let sh = if bh { 1.0 } else { -1.0 };
            let sw = if bw { 1.0 } else { -1.0 };
            g[0] += sd * wh * ww * cv;
            g[1] += wd * sh * ww * cv;
            g[2] += wd * wh * sw * cv;
        }
        for a in 0..3 {
            if self.clamped[a] || self.lo[a] == self.hi[a] {
                g[a] = 0.0;
            }
        }
        g
    }
}

/// Flat corner indices and trilinear weights for a clamped sample position.
pub(crate) fn trilinear_stencil(dims: [usize; 3], p: [f64; 3]) -> ([usize; 8], [f64; 8]) {
    let s = Sampler::new(dims, p);
    let ds = [s.lo[0], s.hi[0]];
    let hs = [s.lo[1], s.hi[1]];
    let ws = [s.lo[2], s.hi[2]];
    let mut idx = [0; 8];
    for (k, slot) in idx.iter_mut().enumerate() {
        *slot = s.idx(ds[k >> 2], hs[(k >> 1) & 1], ws[k & 1]);
    }
    (idx, s.weights())
}

fn sampler_at<T: Scalar>(dims: [usize; 3], u: &[T], n: usize, i: usize, pos: [usize; 3]) -> Sampler {
    let p = [0, 1, 2].map(|a| pos[a] as f64 + u[a * n + i].as_f64());
    Sampler::new(dims, p)
}

fn for_each_voxel(dims: [usize; 3], mut f: impl FnMut(usize, [usize; 3])) {
    let mut i = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                f(i, [d, h, w]);
                i += 1;
            }
        }
    }
}

fn warp_forward<T: Scalar>(src: &Tensor<T>, field: &Tensor<T>) -> Tensor<T> {
    let dims = src.spatial();
    let n = src.voxels();
    let mut out = Tensor::zeros(src.shape());
    for b in 0..src.batch() {
        let u = &field.data()[b * 3 * n..(b + 1) * 3 * n];
        for_each_voxel(dims, |i, pos| {
            let s = sampler_at(dims, u, n, i, pos);
            for c in 0..src.channels() {
                let v = s.value(src.channel(b, c));
                out.channel_mut(b, c)[i] = v;
            }
        });
    }
    out
}

struct Warp;

impl<T: Scalar> Backward<T> for Warp {
    fn backward(&self, p: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, tracked: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (src, field) = (p[0], p[1]);
        let dims = src.spatial();
        let n = src.voxels();
        let mut gsrc = tracked[0].then(|| Tensor::zeros(src.shape()));
        let mut gfield = tracked[1].then(|| Tensor::zeros(field.shape()));
        for b in 0..src.batch() {
            let u = &field.data()[b * 3 * n..(b + 1) * 3 * n];
            for_each_voxel(dims, |i, pos| {
                let s = sampler_at(dims, u, n, i, pos);
                let weights = gsrc.as_ref().map(|_| s.weights());
                let mut gp = [0.0; 3];
                for c in 0..src.channels() {
                    let gv = g.channel(b, c)[i];
                    if let (Some(gs), Some(w)) = (gsrc.as_mut(), weights) {
                        let ds = [s.lo[0], s.hi[0]];
                        let hs = [s.lo[1], s.hi[1]];
                        let ws = [s.lo[2], s.hi[2]];
                        let ch = gs.channel_mut(b, c);
                        for (k, wk) in w.iter().enumerate() {
                            ch[s.idx(ds[k >> 2], hs[(k >> 1) & 1], ws[k & 1])] += gv * T::lit(*wk);
                        }
                    }
                    if gfield.is_some() {
                        let d = s.gradient(src.channel(b, c));
                        for a in 0..3 {
                            gp[a] += gv.as_f64() * d[a];
                        }
                    }
                }
                if let Some(gf) = gfield.as_mut() {
                    for a in 0..3 {
                        gf.data_mut()[b * 3 * n + a * n + i] = T::lit(gp[a]);
                    }
                }
            });
        }
        vec![gsrc, gfield]
    }
}

impl<T: Scalar> Tape<T> {
    /// Differentiable backward warp of every channel of `src` by a 3-channel field.
    pub fn warp(&mut self, src: Var, field: Var) -> Result<Var> {
        let (ss, fs) = (self.shape(src), self.shape(field));
        if fs[1] != 3 || fs[0] != ss[0] || fs[2..] != ss[2..] {
            return Err(Error::shape(format!("warp: source {ss:?}, field {fs:?}")));
        }
        let value = warp_forward(self.value(src), self.value(field));
        Ok(self.push(value, &[src, field], Box::new(Warp)))
    }

    /// `resid + prev(x + resid(x))`: apply `resid`, then `prev`.
    pub fn compose(&mut self, prev: Var, resid: Var) -> Result<Var> {
        let sampled = self.warp(prev, resid)?;
        self.add(resid, sampled)
    }

    /// Trilinear resize of a field plus conversion to target-voxel units.
    pub fn upsample_field(&mut self, field: Var, target: [usize; 3]) -> Result<Var> {
        let src = self.value(field).spatial();
        if src == target {
            return Ok(field);
        }
        let resized = self.trilinear_resize(field, target)?;
        let ratio = [0, 1, 2].map(|a| target[a] as f64 / src[a] as f64);
        self.scale_channels(resized, &ratio)
    }
}

/// Backward-warps a volume.
pub fn warp<T: Scalar>(v: &Volume<T>, u: &DisplacementField<T>) -> Result<Volume<T>> {
    same_dims(v.dims(), u.dims())?;
    let out = warp_forward(&v.to_tensor(), &u.to_tensor());
    Volume::from_tensor(&out, v.spacing())
}

/// Field of the transform "apply `resid`, then `prev`".
pub fn compose<T: Scalar>(prev: &DisplacementField<T>, resid: &DisplacementField<T>) -> Result<DisplacementField<T>> {
    same_dims(prev.dims, resid.dims)?;
    let mut tape = Tape::new();
    let p = tape.constant(prev.to_tensor());
    let r = tape.constant(resid.to_tensor());
    let out = tape.compose(p, r)?;
    Ok(DisplacementField::from_tensor(tape.value(out))?.with_spacing(prev.spacing))
}

/// Resamples `u` onto `target` dims, rescaling values to the new voxel size.
pub fn upsample_field<T: Scalar>(u: &DisplacementField<T>, target: [usize; 3]) -> Result<DisplacementField<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(u.to_tensor());
    let y = tape.upsample_field(x, target)?;
    DisplacementField::from_tensor(tape.value(y))
}

/// Upsampling by an integer factor (2 or 4 in the cascade).
pub fn upsample_field_by<T: Scalar>(u: &DisplacementField<T>, factor: f64) -> Result<DisplacementField<T>> {
    upsample_field(u, scaled_dims(u.dims, factor))
}

pub fn scale_field<T: Scalar>(u: &DisplacementField<T>, s: T) -> DisplacementField<T> {
    DisplacementField { dims: u.dims, spacing: u.spacing, data: u.data.iter().map(|&v| v * s).collect() }
}

/// Per-voxel `det(I + grad u)`: central differences inside, one-sided at borders.
pub fn jacobian_det<T: Scalar>(u: &DisplacementField<T>) -> Result<Volume<T>> {
    let dims = u.dims;
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::shape(format!("jacobian_det needs >= 2 voxels per axis, got {dims:?}")));
    }
    let n = u.voxels();
    let stride = [dims[1] * dims[2], dims[2], 1];
    let mut out = vec![T::zero(); n];
    for_each_voxel(dims, |i, pos| {
        let mut j = [[0.0f64; 3]; 3];
        for a in 0..3 {
            let (lo, hi, h) = if pos[a] == 0 {
                (i, i + stride[a], 1.0)
            } else if pos[a] == dims[a] - 1 {
                (i - stride[a], i, 1.0)
            } else {
                (i - stride[a], i + stride[a], 2.0)
            };
            for (c, row) in j.iter_mut().enumerate() {
                let comp = &u.data[c * n..(c + 1) * n];
                row[a] = (comp[hi].as_f64() - comp[lo].as_f64()) / h;
            }
        }
        for (c, row) in j.iter_mut().enumerate() {
            row[c] += 1.0;
        }
        let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        out[i] = T::lit(det);
    });
    Volume::new(dims, u.spacing, out)
}

/// Percentage of voxels whose Jacobian determinant is non-positive.
pub fn ndv<T: Scalar>(u: &DisplacementField<T>) -> Result<f64> {
    let det = jacobian_det(u)?;
    let bad = det.data().iter().filter(|v| **v <= T::zero()).count();
    Ok(100.0 * bad as f64 / det.len() as f64)
}

/// Mean Euclidean distance between two fields, in voxels.
pub fn endpoint_error<T: Scalar>(a: &DisplacementField<T>, b: &DisplacementField<T>) -> Result<f64> {
    same_dims(a.dims, b.dims)?;
    let n = a.voxels();
    let mut total = 0.0;
    for i in 0..n {
        let sq: f64 = (0..3).map(|c| (a.data[c * n + i].as_f64() - b.data[c * n + i].as_f64()).powi(2)).sum();
        total += sq.sqrt();
    }
    Ok(total / n as f64)
}
