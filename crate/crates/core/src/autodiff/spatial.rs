//! Resampling, filtering and channel/shape operations.

use crate::autodiff::tape::{Backward, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sparse linear map along one axis: `out[i] = sum_j w_ij * in[j]`.
#[derive(Clone, Debug)]
pub(crate) struct LineOp<T> {
    n_in: usize,
    taps: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> LineOp<T> {
    fn n_out(&self) -> usize {
        self.taps.len()
    }

    /// Half-pixel (align-corners-false) linear interpolation `n_in -> n_out`.
    pub fn linear_resize(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let taps = (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let l = src - i0 as f64;
                if l == 0.0 || i0 == i1 {
                    vec![(i0, T::one())]
                } else {
                    vec![(i0, T::lit(1.0 - l)), (i1, T::lit(l))]
                }
            })
            .collect();
        LineOp { n_in, taps }
    }

    /// Block average with window `f`; the last block may be partial.
    pub fn average(n_in: usize, f: usize) -> Self {
        let taps = (0..n_in.div_ceil(f))
            .map(|i| {
                let r = i * f..((i + 1) * f).min(n_in);
                let w = T::lit(1.0 / r.len() as f64);
                r.map(|j| (j, w)).collect()
            })
            .collect();
        LineOp { n_in, taps }
    }

    /// Truncated Gaussian, renormalized over the in-bounds taps.
    pub fn gaussian(n: usize, radius: usize, sigma: f64) -> Self {
        let kernel: Vec<f64> = (0..=2 * radius)
            .map(|t| {
                let x = t as f64 - radius as f64;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let taps = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(n - 1);
                let norm: f64 = (lo..=hi).map(|j| kernel[j + radius - i]).sum();
                (lo..=hi).map(|j| (j, T::lit(kernel[j + radius - i] / norm))).collect()
            })
            .collect();
        LineOp { n_in: n, taps }
    }
}

/// Applies `op` along spatial `axis` (0 = D, 1 = H, 2 = W).
pub(crate) fn apply_axis<T: Scalar>(x: &Tensor<T>, axis: usize, op: &LineOp<T>) -> Tensor<T> {
    let s = x.shape();
    debug_assert_eq!(s[2 + axis], op.n_in);
    let outer: usize = s[..2 + axis].iter().product();
    let inner: usize = s[3 + axis..].iter().product();
    let mut shape = s;
    shape[2 + axis] = op.n_out();
    let mut out = Tensor::zeros(shape);
    let (xd, od) = (x.data(), out.data_mut());
    for o in 0..outer {
        let xb = &xd[o * op.n_in * inner..(o + 1) * op.n_in * inner];
        let ob = &mut od[o * op.n_out() * inner..(o + 1) * op.n_out() * inner];
        for (i, taps) in op.taps.iter().enumerate() {
            let dst = &mut ob[i * inner..(i + 1) * inner];
            for &(j, w) in taps {
                let src = &xb[j * inner..(j + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += w * v;
                }
            }
        }
    }
    out
}

pub(crate) fn apply_axis_transpose<T: Scalar>(g: &Tensor<T>, axis: usize, op: &LineOp<T>) -> Tensor<T> {
    let s = g.shape();
    let outer: usize = s[..2 + axis].iter().product();
    let inner: usize = s[3 + axis..].iter().product();
    let mut shape = s;
    shape[2 + axis] = op.n_in;
    let mut out = Tensor::zeros(shape);
    let (gd, od) = (g.data(), out.data_mut());
    for o in 0..outer {
        let gb = &gd[o * op.n_out() * inner..(o + 1) * op.n_out() * inner];
        let ob = &mut od[o * op.n_in * inner..(o + 1) * op.n_in * inner];
        for (i, taps) in op.taps.iter().enumerate() {
            let src = &gb[i * inner..(i + 1) * inner];
            for &(j, w) in taps {
                let dst = &mut ob[j * inner..(j + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += w * v;
                }
            }
        }
    }
    out
}

/// Separable linear operator: one optional [`LineOp`] per spatial axis.
pub(crate) struct Separable<T> {
    ops: [Option<LineOp<T>>; 3],
}

impl<T: Scalar> Separable<T> {
    pub fn new(ops: [Option<LineOp<T>>; 3]) -> Self {
        Separable { ops }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for (a, op) in self.ops.iter().enumerate() {
            if let Some(op) = op {
                cur = apply_axis(&cur, a, op);
            }
        }
        cur
    }

    pub fn apply_transpose(&self, g: &Tensor<T>) -> Tensor<T> {
        let mut cur = g.clone();
        for (a, op) in self.ops.iter().enumerate().rev() {
            if let Some(op) = op {
                cur = apply_axis_transpose(&cur, a, op);
            }
        }
        cur
    }
}

impl<T: Scalar> Backward<T> for Separable<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(self.apply_transpose(g))]
    }
}

/// Target size of a resize by `factor`, rounded up.
pub fn scaled_dims(dims: [usize; 3], factor: f64) -> [usize; 3] {
    dims.map(|d| (d as f64 * factor - 1e-9).ceil().max(0.0) as usize)
}

struct Pad {
    before: [usize; 3],
}

impl<T: Scalar> Backward<T> for Pad {
    fn backward(&self, p: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(crop_tensor(g, self.before, p[0].spatial()))]
    }
}

struct Crop {
    offset: [usize; 3],
}

impl<T: Scalar> Backward<T> for Crop {
    fn backward(&self, p: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(embed_tensor(g, self.offset, p[0].spatial()))]
    }
}

pub(crate) fn crop_tensor<T: Scalar>(x: &Tensor<T>, offset: [usize; 3], dims: [usize; 3]) -> Tensor<T> {
    let [n, c, _, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, dims[0], dims[1], dims[2]]);
    let od = out.data_mut();
    let mut idx = 0;
    for b in 0..n * c {
        let src = x.channel(b / c, b % c);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let s = ((z + offset[0]) * h + y + offset[1]) * w + offset[2];
                od[idx..idx + dims[2]].copy_from_slice(&src[s..s + dims[2]]);
                idx += dims[2];
            }
        }
    }
    out
}

/// Places `x` at `offset` inside a zero tensor of spatial size `dims`.
pub(crate) fn embed_tensor<T: Scalar>(x: &Tensor<T>, offset: [usize; 3], dims: [usize; 3]) -> Tensor<T> {
    let [n, c, d, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, dims[0], dims[1], dims[2]]);
    for b in 0..n * c {
        let src = x.channel(b / c, b % c);
        let dst = out.channel_mut(b / c, b % c);
        for z in 0..d {
            for y in 0..h {
                let s = (z * h + y) * w;
                let t = ((z + offset[0]) * dims[1] + y + offset[1]) * dims[2] + offset[2];
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    out
}

struct Concat {
    channels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Concat {
    fn backward(&self, p: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, tracked: &[bool]) -> Vec<Option<Tensor<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut start = 0;
        let mut out = Vec::new();
        for (i, &c) in self.channels.iter().enumerate() {
            if tracked[i] {
                let mut t = Tensor::zeros(p[i].shape());
                for b in 0..g.batch() {
                    for k in 0..c {
                        let src = g.channel(b, start + k);
                        t.channel_mut(b, k).copy_from_slice(src);
                    }
                }
                out.push(Some(t));
            } else {
                out.push(None);
            }
            start += c;
        }
        debug_assert_eq!(start, total);
        out
    }
}

struct Bias;

impl<T: Scalar> Backward<T> for Bias {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, tracked: &[bool]) -> Vec<Option<Tensor<T>>> {
        let gb = tracked[1].then(|| {
            let c = g.channels();
            Tensor::from_fn([1, c, 1, 1, 1], |k| {
                let s: f64 = (0..g.batch()).map(|b| g.channel(b, k).iter().map(|v| v.as_f64()).sum::<f64>()).sum();
                T::lit(s)
            })
        });
        vec![tracked[0].then(|| g.clone()), gb]
    }
}

struct ScaleChannels(Vec<f64>);

impl<T: Scalar> Backward<T> for ScaleChannels {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(scale_channels(g, &self.0))]
    }
}

fn scale_channels<T: Scalar>(x: &Tensor<T>, f: &[f64]) -> Tensor<T> {
    let mut out = x.clone();
    for b in 0..x.batch() {
        for (k, &s) in f.iter().enumerate() {
            let s = T::lit(s);
            for v in out.channel_mut(b, k) {
                *v *= s;
            }
        }
    }
    out
}

struct InstanceNorm {
    eps: f64,
}

impl<T: Scalar> Backward<T> for InstanceNorm {
    fn backward(&self, p: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = p[0];
        let mut gx = Tensor::zeros(x.shape());
        let n = x.voxels() as f64;
        for b in 0..x.batch() {
            for c in 0..x.channels() {
                let xs = x.channel(b, c);
                let ys = out.channel(b, c);
                let gs = g.channel(b, c);
                let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / n;
                let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + self.eps).sqrt();
                let gmean = gs.iter().map(|v| v.as_f64()).sum::<f64>() / n;
                let gy = gs.iter().zip(ys).map(|(g, y)| g.as_f64() * y.as_f64()).sum::<f64>() / n;
                for ((o, gv), yv) in gx.channel_mut(b, c).iter_mut().zip(gs).zip(ys) {
                    *o = T::lit(inv * (gv.as_f64() - gmean - yv.as_f64() * gy));
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Tape<T> {
    /// Half-pixel trilinear resize to `target` spatial dims.
    pub fn trilinear_resize(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let src = self.value(x).spatial();
        if target.contains(&0) || src.contains(&0) {
            return Err(Error::shape(format!("trilinear_resize: {src:?} -> {target:?}")));
        }
        if src == target {
            return Ok(x);
        }
        let ops = [0, 1, 2].map(|a| (src[a] != target[a]).then(|| LineOp::linear_resize(src[a], target[a])));
        Ok(self.separable(x, Separable::new(ops)))
    }

    /// Resize by a scale factor; output dims are rounded up.
    pub fn resize_by(&mut self, x: Var, factor: f64) -> Result<Var> {
        let dims = scaled_dims(self.value(x).spatial(), factor);
        self.trilinear_resize(x, dims)
    }

    /// Block-average pooling by `factor`; output dims are `ceil(dim / factor)`.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("avg_pool factor must be positive"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let s = self.value(x).spatial();
        let ops = s.map(|n| Some(LineOp::average(n, factor)));
        Ok(self.separable(x, Separable::new(ops)))
    }

    /// Normalized Gaussian smoothing with truncation `radius` along every axis.
    pub fn gaussian_filter(&mut self, x: Var, radius: usize, sigma: f64) -> Var {
        let s = self.value(x).spatial();
        let ops = s.map(|n| Some(LineOp::gaussian(n, radius, sigma)));
        self.separable(x, Separable::new(ops))
    }

    pub(crate) fn separable(&mut self, x: Var, op: Separable<T>) -> Var {
        let value = op.apply(self.value(x));
        self.push(value, &[x], Box::new(op))
    }

    /// Zero-pads spatial axes by `before`/`after` voxels.
    pub fn pad(&mut self, x: Var, before: [usize; 3], after: [usize; 3]) -> Var {
        let s = self.value(x).spatial();
        let dims = [0, 1, 2].map(|a| s[a] + before[a] + after[a]);
        let value = embed_tensor(self.value(x), before, dims);
        self.push(value, &[x], Box::new(Pad { before }))
    }

    pub fn crop(&mut self, x: Var, offset: [usize; 3], dims: [usize; 3]) -> Result<Var> {
        let s = self.value(x).spatial();
        if (0..3).any(|a| offset[a] + dims[a] > s[a]) {
            return Err(Error::shape(format!("crop {offset:?}+{dims:?} exceeds {s:?}")));
        }
        let value = crop_tensor(self.value(x), offset, dims);
        Ok(self.push(value, &[x], Box::new(Crop { offset })))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]);
        for &x in xs {
            let s = self.shape(x);
            if s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape(format!("concat: {s:?} vs {first:?}")));
            }
        }
        let channels: Vec<usize> = xs.iter().map(|&x| self.shape(x)[1]).collect();
        let total = channels.iter().sum();
        let mut out = Tensor::zeros([first[0], total, first[2], first[3], first[4]]);
        for b in 0..first[0] {
            let mut at = 0;
            for &x in xs {
                let t = self.value(x);
                for k in 0..t.channels() {
                    out.channel_mut(b, at + k).copy_from_slice(t.channel(b, k));
                }
                at += t.channels();
            }
        }
        Ok(self.push(out, xs, Box::new(Concat { channels })))
    }

    /// Adds a `(1, C, 1, 1, 1)` bias to every voxel of channel `C`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs != [1, xs[1], 1, 1, 1] {
            return Err(Error::shape(format!("bias {bs:?} for input {xs:?}")));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for n in 0..xs[0] {
            for (c, &bv) in b.iter().enumerate() {
                for v in out.channel_mut(n, c) {
                    *v += bv;
                }
            }
        }
        Ok(self.push(out, &[x, bias], Box::new(Bias)))
    }

    /// Multiplies channel `c` by the constant `factors[c]`.
    pub fn scale_channels(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        if factors.len() != self.shape(x)[1] {
            return Err(Error::shape(format!("{} factors for {} channels", factors.len(), self.shape(x)[1])));
        }
        let value = scale_channels(self.value(x), factors);
        Ok(self.push(value, &[x], Box::new(ScaleChannels(factors.to_vec()))))
    }

    /// Per-(batch, channel) normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape());
        let n = t.voxels() as f64;
        for b in 0..t.batch() {
            for c in 0..t.channels() {
                let xs = t.channel(b, c);
                let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / n;
                let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                for (o, v) in out.channel_mut(b, c).iter_mut().zip(xs) {
                    *o = T::lit((v.as_f64() - mean) * inv);
                }
            }
        }
        self.push(out, &[x], Box::new(InstanceNorm { eps }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_factor_one_is_identity() {
        let mut tape = Tape::<f32>::new();
        let t = Tensor::from_fn([1, 2, 3, 4, 5], |i| i as f32);
        let x = tape.constant(t.clone());
        let y = tape.resize_by(x, 1.0).unwrap();
        assert_eq!(tape.value(y), &t);
    }

    #[test]
    fn resize_preserves_constants() {
        for &f in &[0.25, 0.5, 2.0, 4.0] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::full([1, 1, 8, 4, 6], 1.7));
            let y = tape.resize_by(x, f).unwrap();
            assert!(tape.value(y).data().iter().all(|v| (v - 1.7).abs() < 1e-12));
        }
    }

    #[test]
    fn resize_ramp_matches_direct_weights() {
        // Doubling a ramp along W: out[i] samples src = (i + 0.5) / 2 - 0.5, clamped.
        let w_in = 4;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 1, 1, w_in], |i| (i * i) as f64));
        let y = tape.trilinear_resize(x, [1, 1, 8]).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.75, 3.25, 5.25, 7.75, 9.0];
        for (a, b) in tape.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_rejects_zero_size() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 2, 2, 2]));
        assert!(tape.trilinear_resize(x, [0, 2, 2]).is_err());
    }

    #[test]
    fn avg_pool_partial_blocks() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 1, 1, 5], |i| i as f64));
        let y = tape.avg_pool(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 2.5, 4.0]);
    }

    #[test]
    fn gaussian_preserves_constants() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 6, 7, 5], 3.0));
        let y = tape.gaussian_filter(x, 4, 2.25);
        assert!(tape.value(y).data().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let mut tape = Tape::<f32>::new();
        let t = Tensor::from_fn([1, 2, 3, 2, 3], |i| i as f32);
        let x = tape.constant(t.clone());
        let p = tape.pad(x, [1, 0, 2], [0, 3, 1]);
        assert_eq!(tape.value(p).spatial(), [4, 5, 6]);
        let c = tape.crop(p, [1, 0, 2], [3, 2, 3]).unwrap();
        assert_eq!(tape.value(c), &t);
    }
}
