//! Small 3D U-Net predicting a residual displacement field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNet3DConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub negative_slope: f64,
    pub zero_init_final: bool,
    pub instance_norm: bool,
}

impl Default for UNet3DConfig {
    fn default() -> Self {
        UNet3DConfig {
            in_channels: 2,
            out_channels: 3,
            base_channels: 32,
            depth: 3,
            negative_slope: 0.2,
            zero_init_final: true,
            instance_norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvSpec {
    fn new(name: String, c_in: usize, c_out: usize, k: usize) -> Self {
        ConvSpec { name, c_in, c_out, k }
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [self.c_out, self.c_in, self.k, self.k, self.k]
    }

    pub fn bias_shape(&self) -> [usize; 5] {
        [1, self.c_out, 1, 1, 1]
    }
}

impl UNet3DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!("invalid U-Net config {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every convolution in forward order: encoder, bottleneck, decoder (deepest first), head.
    pub fn layers(&self) -> Vec<ConvSpec> {
        let mut out = Vec::new();
        let mut c = self.in_channels;
        for i in 0..self.depth {
            let w = self.width(i);
            out.push(ConvSpec::new(format!("enc{i}.conv0"), c, w, 3));
            out.push(ConvSpec::new(format!("enc{i}.conv1"), w, w, 3));
            c = w;
        }
        out.push(ConvSpec::new("mid.conv0".into(), c, c, 3));
        out.push(ConvSpec::new("mid.conv1".into(), c, c, 3));
        for i in (0..self.depth).rev() {
            let w = self.width(i);
            out.push(ConvSpec::new(format!("dec{i}.conv0"), c + w, w, 3));
            out.push(ConvSpec::new(format!("dec{i}.conv1"), w, w, 3));
            c = w;
        }
        out.push(ConvSpec::new("head".into(), c, self.out_channels, 1));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.c_out * l.c_in * l.k.pow(3) + l.c_out).sum()
    }
}

/// Named weights and biases of one U-Net, in [`UNet3DConfig::layers`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams<T> {
    pub config: UNet3DConfig,
    /// `(name, weight)`, `(name, bias)` pairs interleaved per layer.
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> UNetParams<T> {
    pub fn init(config: &UNet3DConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let layers = config.layers();
        let gain = (2.0 / (1.0 + config.negative_slope.powi(2))).sqrt();
        let mut tensors = Vec::with_capacity(2 * layers.len());
        for (i, l) in layers.iter().enumerate() {
            let last = i + 1 == layers.len();
            let w = if last && config.zero_init_final {
                Tensor::zeros(l.weight_shape())
            } else {
                let fan_in = (l.c_in * l.k.pow(3)) as f64;
                let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("positive std");
                Tensor::from_fn(l.weight_shape(), |_| T::lit(normal.sample(rng)))
            };
            tensors.push((format!("{}.weight", l.name), w));
            tensors.push((format!("{}.bias", l.name), Tensor::zeros(l.bias_shape())));
        }
        Ok(UNetParams { config: config.clone(), tensors })
    }

    pub fn seeded(config: &UNet3DConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    /// Runs the network on an `(1, in_channels, D, H, W)` input; output has the input's spatial dims.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let cfg = &self.config;
        let layers = cfg.layers();
        if vars.len() != 2 * layers.len() {
            return Err(Error::invalid(format!("expected {} parameter vars, got {}", 2 * layers.len(), vars.len())));
        }
        let shape = tape.shape(x);
        if shape[1] != cfg.in_channels {
            return Err(Error::shape(format!("U-Net expects {} input channels, got {}", cfg.in_channels, shape[1])));
        }
        let dims = [shape[2], shape[3], shape[4]];
        let m = 1usize << cfg.depth;
        let padded = dims.map(|d| d.div_ceil(m) * m);
        let before = [0, 1, 2].map(|a| (padded[a] - dims[a]) / 2);
        let after = [0, 1, 2].map(|a| padded[a] - dims[a] - before[a]);
        let mut h = if padded == dims { x } else { tape.pad(x, before, after) };

        let mut li = 0;
        let mut conv = |tape: &mut Tape<T>, h: Var, act: bool| -> Result<Var> {
            let l = &layers[li];
            let (w, b) = (vars[2 * li], vars[2 * li + 1]);
            li += 1;
            let y = tape.conv3d(h, w, 1, l.k / 2)?;
            let mut y = tape.add_bias(y, b)?;
            if act {
                if cfg.instance_norm {
                    y = tape.instance_norm(y, 1e-5);
                }
                y = tape.leaky_relu(y, cfg.negative_slope);
            }
            Ok(y)
        };

        let mut skips = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            h = conv(tape, h, true)?;
            h = conv(tape, h, true)?;
            skips.push(h);
            h = tape.avg_pool(h, 2)?;
        }
        h = conv(tape, h, true)?;
        h = conv(tape, h, true)?;
        for skip in skips.into_iter().rev() {
            let target = tape.value(skip).spatial();
            h = tape.trilinear_resize(h, target)?;
            h = tape.concat_channels(&[h, skip])?;
            h = conv(tape, h, true)?;
            h = conv(tape, h, true)?;
        }
        h = conv(tape, h, false)?;
        if padded == dims {
            Ok(h)
        } else {
            tape.crop(h, before, dims)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UNet3DConfig {
        UNet3DConfig { base_channels: 2, depth: 2, ..Default::default() }
    }

    #[test]
    fn param_count_closed_form() {
        let cfg = UNet3DConfig::default();
        let conv = |a: usize, b: usize, k: usize| a * b * k * k * k + b;
        let (b, d) = (32, 3);
        let w = |i: usize| b << i;
        let mut n = conv(2, w(0), 3) + conv(w(0), w(0), 3);
        for i in 1..d {
            n += conv(w(i - 1), w(i), 3) + conv(w(i), w(i), 3);
        }
        n += 2 * conv(w(d - 1), w(d - 1), 3);
        let mut c = w(d - 1);
        for i in (0..d).rev() {
            n += conv(c + w(i), w(i), 3) + conv(w(i), w(i), 3);
            c = w(i);
        }
        n += conv(w(0), 3, 1);
        assert_eq!(cfg.param_count(), n);
        let p = UNetParams::<f32>::seeded(&cfg, 0).unwrap();
        assert_eq!(p.len(), n);
    }

    #[test]
    fn zero_head_gives_zero_output_and_dims_survive_padding() {
        let cfg = small();
        let p = UNetParams::<f32>::seeded(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn([1, 2, 5, 7, 6], |i| (i as f32 * 0.37).sin()));
        let y = p.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.shape(y), [1, 3, 5, 7, 6]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = UNetParams::<f32>::seeded(&small(), 5).unwrap();
        let b = UNetParams::<f32>::seeded(&small(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, UNetParams::<f32>::seeded(&small(), 6).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = UNet3DConfig { depth: 0, ..Default::default() };
        assert!(UNetParams::<f32>::seeded(&cfg, 0).is_err());
    }
}
