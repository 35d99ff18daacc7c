//! Central finite-difference checks of every differentiable op, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regadapt::autodiff::pointwise::Unary;
use regadapt::autodiff::tape::{Tape, Var};
use regadapt::autodiff::tensor::Tensor;
use regadapt::refine::{UNet3DConfig, UNetParams};
use regadapt::Result;

const PROBES: usize = 20;
const H: f64 = 1e-6;

pub struct Outcome {
    pub name: String,
    pub error: f64,
    pub tol: f64,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.error < self.tol
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn random(shape: [usize; 5], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sum(out * r)` with a fixed random `r`, so every output element contributes.
fn objective(build: &Build, inputs: &[Tensor<f64>], r: &mut Option<Tensor<f64>>, seed: u64) -> (f64, Option<Vec<Tensor<f64>>>, Tape<f64>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.shape(out);
    let weights = r.get_or_insert_with(|| random(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))).clone();
    let w = tape.constant(weights);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).unwrap();
    let g = vars.iter().map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[0].shape()))).collect();
    (value, Some(g), tape)
}

fn eval(build: &Build, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = tape.constant(r.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.value(loss).item()
}

/// Returns the largest relative error over `PROBES` random coordinates.
fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>, probe_inputs: &[usize], seed: u64, tol: f64) -> Outcome {
    let mut r = None;
    let (_, grads, _tape) = objective(build, &inputs, &mut r, seed);
    let grads = grads.unwrap();
    let r = r.unwrap();
    // Differences below this are rounding noise of the difference quotient.
    let scale = grads.iter().map(|g| g.max_abs()).fold(0.0, f64::max);
    let floor = (1e-5 * scale).max(1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for p in 0..PROBES {
        let which = probe_inputs[p % probe_inputs.len()];
        let idx = rng.gen_range(0..inputs[which].len());
        let mut plus = inputs.clone();
        plus[which].data_mut()[idx] += H;
        let mut minus = inputs.clone();
        minus[which].data_mut()[idx] -= H;
        let numeric = (eval(build, &plus, &r) - eval(build, &minus, &r)) / (2.0 * H);
        let analytic = grads[which].data()[idx];
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        worst = worst.max(rel);
    }
    println!("{name}: max relative error {worst:.3e} (gradient scale {scale:.2e}, tolerance {tol:.0e})");
    Outcome { name: name.to_string(), error: worst, tol }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn conv3d_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut g = rng(1);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let x = random([1, 2, 6, 5, 7], -1.0, 1.0, &mut g);
        let w = random([3, 2, k, k, k], -1.0, 1.0, &mut g);
        let build = move |t: &mut Tape<f64>, v: &[Var]| t.conv3d(v[0], v[1], stride, pad);
        out.push(check(&format!("conv3d s{stride} p{pad} k{k}"), &build, vec![x, w], &[0, 1], 10 + stride as u64, 1e-4));
    }
    out
}

pub fn resize_and_pool_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut g = rng(2);
    let x = random([1, 2, 5, 6, 4], -1.0, 1.0, &mut g);
    let up = |t: &mut Tape<f64>, v: &[Var]| t.trilinear_resize(v[0], [8, 7, 3]);
    out.push(check("trilinear_resize", &up, vec![x.clone()], &[0], 20, 1e-4));
    let x8 = random([1, 2, 8, 8, 4], -1.0, 1.0, &mut g);
    let pool = |t: &mut Tape<f64>, v: &[Var]| t.avg_pool(v[0], 2);
    out.push(check("avg_pool", &pool, vec![x8], &[0], 21, 1e-4));
    let blur = |t: &mut Tape<f64>, v: &[Var]| Ok(t.gaussian_filter(v[0], 2, 1.25));
    out.push(check("gaussian_filter", &blur, vec![x.clone()], &[0], 22, 1e-4));
    let padcrop = |t: &mut Tape<f64>, v: &[Var]| {
        let p = t.pad(v[0], [1, 0, 2], [0, 1, 1]);
        t.crop(p, [0, 1, 1], [5, 5, 4])
    };
    out.push(check("pad+crop", &padcrop, vec![x], &[0], 23, 1e-4));
    out
}

pub fn pointwise_and_reduce_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut g = rng(3);
    let a = random([1, 2, 3, 4, 5], 0.2, 2.0, &mut g);
    let b = random([1, 2, 3, 4, 5], -2.0, 2.0, &mut g);
    let unaries = [
        Unary::LeakyRelu(0.2),
        Unary::Scale(-1.7),
        Unary::Neg,
        Unary::Square,
        Unary::AddScalar(0.3),
        Unary::Powf(0.5),
    ];
    for (i, op) in unaries.into_iter().enumerate() {
        let build = move |t: &mut Tape<f64>, v: &[Var]| Ok(t.unary(v[0], op));
        let input = if matches!(op, Unary::LeakyRelu(_)) { b.clone() } else { a.clone() };
        out.push(check(&format!("{op:?}"), &build, vec![input], &[0], 30 + i as u64, 1e-4));
    }
    let add = |t: &mut Tape<f64>, v: &[Var]| t.add(v[0], v[1]);
    let sub = |t: &mut Tape<f64>, v: &[Var]| t.sub(v[0], v[1]);
    let mul = |t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1]);
    out.push(check("add", &add, vec![a.clone(), b.clone()], &[0, 1], 40, 1e-4));
    out.push(check("sub", &sub, vec![a.clone(), b.clone()], &[0, 1], 41, 1e-4));
    out.push(check("mul", &mul, vec![a.clone(), b.clone()], &[0, 1], 42, 1e-4));
    let sum = |t: &mut Tape<f64>, v: &[Var]| {
        let s = t.square(v[0]);
        Ok(t.sum(s))
    };
    let mean = |t: &mut Tape<f64>, v: &[Var]| {
        let s = t.mul(v[0], v[1])?;
        Ok(t.mean(s))
    };
    out.push(check("sum", &sum, vec![b.clone()], &[0], 43, 1e-4));
    out.push(check("mean", &mean, vec![a, b], &[0, 1], 44, 1e-4));
    out
}

pub fn channel_op_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut g = rng(4);
    let x = random([1, 3, 4, 5, 3], -1.0, 1.0, &mut g);
    let y = random([1, 2, 4, 5, 3], -1.0, 1.0, &mut g);
    let bias = random([1, 3, 1, 1, 1], -1.0, 1.0, &mut g);
    let cat = |t: &mut Tape<f64>, v: &[Var]| t.concat_channels(&[v[0], v[1]]);
    out.push(check("concat_channels", &cat, vec![x.clone(), y], &[0, 1], 50, 1e-4));
    let add_bias = |t: &mut Tape<f64>, v: &[Var]| t.add_bias(v[0], v[1]);
    out.push(check("add_bias", &add_bias, vec![x.clone(), bias], &[0, 1], 51, 1e-4));
    let scale = |t: &mut Tape<f64>, v: &[Var]| t.scale_channels(v[0], &[0.5, -2.0, 3.0]);
    out.push(check("scale_channels", &scale, vec![x.clone()], &[0], 52, 1e-4));
    let norm = |t: &mut Tape<f64>, v: &[Var]| Ok(t.instance_norm(v[0], 1e-5));
    out.push(check("instance_norm", &norm, vec![x], &[0], 53, 1e-4));
    out
}

/// Smooth test image with values away from any clamp boundary.
fn smooth_volume(shape: [usize; 5], phase: f64) -> Tensor<f64> {
    let [_, c, d, h, w] = shape;
    let mut t = Tensor::zeros(shape);
    for ch in 0..c {
        let data = t.channel_mut(0, ch);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = (0.9 * z as f64 + phase + ch as f64).sin() + (0.7 * y as f64).cos() * (0.5 * x as f64 + phase).sin();
                    data[(z * h + y) * w + x] = v;
                }
            }
        }
    }
    t
}

pub fn warp_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut g = rng(5);
    let src = smooth_volume([1, 2, 6, 7, 5], 0.3);
    let field = random([1, 3, 6, 7, 5], -1.4, 1.4, &mut g);
    let warp = |t: &mut Tape<f64>, v: &[Var]| t.warp(v[0], v[1]);
    out.push(check("warp wrt field", &warp, vec![src.clone(), field.clone()], &[1], 60, 1e-3));
    out.push(check("warp wrt source", &warp, vec![src, field.clone()], &[0], 61, 1e-4));
    let prev = random([1, 3, 6, 7, 5], -0.8, 0.8, &mut g);
    let compose = |t: &mut Tape<f64>, v: &[Var]| t.compose(v[0], v[1]);
    out.push(check("compose", &compose, vec![prev, field], &[0, 1], 62, 1e-3));
    let coarse = random([1, 3, 3, 4, 3], -0.5, 0.5, &mut g);
    let up = |t: &mut Tape<f64>, v: &[Var]| t.upsample_field(v[0], [6, 7, 5]);
    out.push(check("upsample_field", &up, vec![coarse], &[0], 63, 1e-4));
    out
}

pub fn similarity_and_regularizer_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut g = rng(6);
    let a = smooth_volume([1, 1, 8, 8, 8], 0.0);
    let noise = random([1, 1, 8, 8, 8], -0.3, 0.3, &mut g);
    let b = Tensor::from_fn(a.shape(), |i| a.data()[i] * 0.7 + noise.data()[i]);
    for window in [3, 5, 9] {
        let lncc = move |t: &mut Tape<f64>, v: &[Var]| t.lncc(v[0], v[1], window);
        out.push(check(&format!("lncc w{window}"), &lncc, vec![a.clone(), b.clone()], &[0, 1], 70 + window as u64, 1e-4));
    }
    let map = |t: &mut Tape<f64>, v: &[Var]| t.lncc_map(v[0], v[1], 5);
    out.push(check("lncc_map", &map, vec![a, b], &[0, 1], 80, 1e-4));
    let u = random([1, 3, 7, 6, 8], -1.0, 1.0, &mut g);
    let reg = |t: &mut Tape<f64>, v: &[Var]| t.diffusion_reg(v[0]);
    out.push(check("diffusion_reg", &reg, vec![u], &[0], 81, 1e-4));
    out
}

pub fn unet_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    let config = UNet3DConfig { base_channels: 2, depth: 2, zero_init_final: false, ..Default::default() };
    let params = UNetParams::<f64>::seeded(&config, 7).unwrap();
    let mut inputs = vec![random([1, 2, 8, 8, 8], -1.0, 1.0, &mut rng(8))];
    // Non-zero biases so every bias gradient is exercised.
    let mut g = rng(9);
    for (_, t) in &params.tensors {
        inputs.push(Tensor::from_fn(t.shape(), |i| if t.data()[i] == 0.0 { g.gen_range(-0.1..0.1) } else { t.data()[i] }));
    }
    let n = inputs.len();
    let p = params.clone();
    let build = move |t: &mut Tape<f64>, v: &[Var]| p.forward(t, &v[1..], v[0]);
    let all: Vec<usize> = (0..n).collect();
    out.push(check("unet", &build, inputs, &all, 90, 1e-3));
    out
}

pub fn cascade_loss_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    use regadapt::refine::{init_cascade, CascadeConfig};
    let unet = UNet3DConfig { base_channels: 2, depth: 1, zero_init_final: false, ..Default::default() };
    let config = CascadeConfig { unet, output_scale: 0.5, ..Default::default() };
    let mut cascade = init_cascade::<f64>(&config, 3).unwrap();
    let mut g = rng(10);
    for t in cascade.tensors_mut() {
        for v in t.data_mut() {
            *v += g.gen_range(-0.05..0.05);
        }
    }
    let moving = smooth_volume([1, 1, 8, 8, 8], 0.0);
    let fixed = smooth_volume([1, 1, 8, 8, 8], 0.4);
    let phi0 = random([1, 3, 8, 8, 8], -0.3, 0.3, &mut g);
    let sizes: Vec<usize> = cascade.nets.iter().map(|n| n.tensors.len()).collect();
    let mut inputs = vec![phi0];
    inputs.extend(cascade.tensors().cloned());
    let n = inputs.len();
    let c = cascade.clone();
    let build = move |t: &mut Tape<f64>, v: &[Var]| {
        let mut params = Vec::new();
        let mut at = 1;
        for &s in &sizes {
            params.push(v[at..at + s].to_vec());
            at += s;
        }
        let m = t.constant(moving.clone());
        let f = t.constant(fixed.clone());
        let out = c.forward(t, &params, v[0], m, f)?;
        let nodes = t.total_loss(&out.warps, f, *out.fields.last().unwrap(), 0.1, 3)?;
        Ok(nodes.total)
    };
    let all: Vec<usize> = (0..n).collect();
    out.push(check("cascade total loss", &build, inputs, &all, 100, 1e-3));
    out
}

/// Every group, in order.
pub fn all() -> Vec<Outcome> {
    [
        conv3d_gradients as fn() -> Vec<Outcome>,
        resize_and_pool_gradients,
        pointwise_and_reduce_gradients,
        channel_op_gradients,
        warp_gradients,
        similarity_and_regularizer_gradients,
        unet_gradients,
        cascade_loss_gradients,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}
