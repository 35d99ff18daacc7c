//! 3D convolution by slab-wise im2col + GEMM.

use std::ops::Range;

use crate::autodiff::tape::{Backward, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{matmul, Layout, Scalar};

/// Upper bound on im2col buffer elements per slab.
const COL_BUDGET: usize = 1 << 18;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn out_voxels(&self) -> usize {
        self.output[0] * self.plane()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    /// Ranges of output lines (one line = one `(d, h)` row of `W` outputs).
    fn slabs(&self) -> impl Iterator<Item = Range<usize>> {
        let per = (COL_BUDGET / (self.rows() * self.output[2]).max(1)).max(1);
        let lines = self.output[0] * self.output[1];
        (0..lines.div_ceil(per)).map(move |i| i * per..((i + 1) * per).min(lines))
    }

    /// Output indices `o` along an axis of input length `n` whose source
    /// `o * stride + kk - pad` is in bounds.
    fn valid(&self, n: usize, out_n: usize, kk: usize) -> Range<usize> {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (n as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, out_n as isize) as usize;
        (lo as usize).min(hi)..hi
    }
}

/// Output spatial size of a convolution.
pub fn conv_output_dims(input: [usize; 3], k: usize, stride: usize, pad: usize) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let span = input[a] + 2 * pad;
        if span < k || stride == 0 {
            return None;
        }
        out[a] = (span - k) / stride + 1;
    }
    Some(out)
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, slab: Range<usize>, col: &mut [T]) {
    let [id_n, ih, iw] = g.input;
    let [od_n, oh, ow] = g.output;
    let cols = slab.len() * ow;
    let k = g.k;
    let vin = g.in_voxels();
    for ci in 0..g.cin {
        let xc = &x[ci * vin..(ci + 1) * vin];
        for kd in 0..k {
            let vd = g.valid(id_n, od_n, kd);
            for kh in 0..k {
                let vh = g.valid(ih, oh, kh);
                for kw in 0..k {
                    let vw = g.valid(iw, ow, kw);
                    let r = ((ci * k + kd) * k + kh) * k + kw;
                    let row = &mut col[r * cols..(r + 1) * cols];
                    for (li, line) in slab.clone().enumerate() {
                        let (od, o_h) = (line / oh, line % oh);
                        let dst = &mut row[li * ow..(li + 1) * ow];
                        if !vd.contains(&od) || !vh.contains(&o_h) || vw.is_empty() {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &xc[((od * g.stride + kd - g.pad) * ih + o_h * g.stride + kh - g.pad) * iw..];
                        dst[..vw.start].fill(T::zero());
                        dst[vw.end..].fill(T::zero());
                        if g.stride == 1 {
                            let s0 = vw.start + kw - g.pad;
                            dst[vw.clone()].copy_from_slice(&src[s0..s0 + vw.len()]);
                        } else {
                            for o_w in vw.clone() {
                                dst[o_w] = src[o_w * g.stride + kw - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, slab: Range<usize>, dx: &mut [T]) {
    let [id_n, ih, iw] = g.input;
    let [od_n, oh, ow] = g.output;
    let cols = slab.len() * ow;
    let k = g.k;
    let vin = g.in_voxels();
    for ci in 0..g.cin {
        let xc = &mut dx[ci * vin..(ci + 1) * vin];
        for kd in 0..k {
            let vd = g.valid(id_n, od_n, kd);
            for kh in 0..k {
                let vh = g.valid(ih, oh, kh);
                for kw in 0..k {
                    let vw = g.valid(iw, ow, kw);
                    let r = ((ci * k + kd) * k + kh) * k + kw;
                    let row = &col[r * cols..(r + 1) * cols];
                    for (li, line) in slab.clone().enumerate() {
                        let (od, o_h) = (line / oh, line % oh);
                        if !vd.contains(&od) || !vh.contains(&o_h) {
                            continue;
                        }
                        let base = ((od * g.stride + kd - g.pad) * ih + o_h * g.stride + kh - g.pad) * iw;
                        let src = &row[li * ow..(li + 1) * ow];
                        if g.stride == 1 {
                            let s0 = base + vw.start + kw - g.pad;
                            for (d, s) in xc[s0..s0 + vw.len()].iter_mut().zip(&src[vw.clone()]) {
                                *d += *s;
                            }
                        } else {
                            for o_w in vw.clone() {
                                xc[base + o_w * g.stride + kw - g.pad] += src[o_w];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Geometry) -> Tensor<T> {
    let n = x.batch();
    let mut out = Tensor::zeros([n, g.cout, g.output[0], g.output[1], g.output[2]]);
    let rows = g.rows();
    let pv = g.out_voxels();
    let mut col = Vec::new();
    for b in 0..n {
        let xb = &x.data()[b * g.cin * g.in_voxels()..(b + 1) * g.cin * g.in_voxels()];
        for slab in g.slabs() {
            let cols = slab.len() * g.output[2];
            col.resize(rows * cols, T::zero());
            im2col(xb, g, slab.clone(), &mut col);
            let off = b * g.cout * pv + slab.start * g.output[2];
            matmul(
                w.data(),
                Layout::row_major(g.cout, rows),
                &col,
                Layout::row_major(rows, cols),
                T::zero(),
                &mut out.data_mut()[off..],
                Layout { rows: g.cout, cols, rs: pv, cs: 1 },
            );
        }
    }
    out
}

struct Conv3d(Geometry);

impl<T: Scalar> Backward<T> for Conv3d {
    fn backward(&self, p: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, tracked: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = &self.0;
        let (x, w) = (p[0], p[1]);
        let rows = g.rows();
        let pv = g.out_voxels();
        let mut dx = tracked[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = tracked[1].then(|| Tensor::zeros(w.shape()));
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for b in 0..x.batch() {
            let span = g.cin * g.in_voxels();
            let xb = &x.data()[b * span..(b + 1) * span];
            for slab in g.slabs() {
                let cols = slab.len() * g.output[2];
                let off = b * g.cout * pv + slab.start * g.output[2];
                let gl = Layout { rows: g.cout, cols, rs: pv, cs: 1 };
                if let Some(dw) = dw.as_mut() {
                    col.resize(rows * cols, T::zero());
                    im2col(xb, g, slab.clone(), &mut col);
                    matmul(
                        &grad.data()[off..],
                        gl,
                        &col,
                        Layout::row_major(rows, cols).transposed(),
                        T::one(),
                        dw.data_mut(),
                        Layout::row_major(g.cout, rows),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    dcol.resize(rows * cols, T::zero());
                    matmul(
                        w.data(),
                        Layout::row_major(g.cout, rows).transposed(),
                        &grad.data()[off..],
                        gl,
                        T::zero(),
                        &mut dcol,
                        Layout::row_major(rows, cols),
                    );
                    col2im(&dcol, g, slab.clone(), &mut dx.data_mut()[b * span..(b + 1) * span]);
                }
            }
        }
        vec![dx, dw]
    }
}

impl<T: Scalar> Tape<T> {
    /// Zero-padded cross-correlation with a `(C_out, C_in, k, k, k)` kernel.
    pub fn conv3d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        let k = ks[2];
        if ks[3] != k || ks[4] != k || k % 2 == 0 {
            return Err(Error::invalid(format!("conv3d kernel must be cubic with odd size, got {ks:?}")));
        }
        if ks[1] != xs[1] {
            return Err(Error::shape(format!("conv3d: input has {} channels, kernel expects {}", xs[1], ks[1])));
        }
        let input = [xs[2], xs[3], xs[4]];
        let output = conv_output_dims(input, k, stride, padding)
            .ok_or_else(|| Error::shape(format!("conv3d: input {input:?} too small for k={k}, padding={padding}")))?;
        let geo = Geometry { cin: xs[1], cout: ks[0], k, stride, pad: padding, input, output };
        let value = forward(self.value(x), self.value(kernel), &geo);
        Ok(self.push(value, &[x, kernel], Box::new(Conv3d(geo))))
    }
}
