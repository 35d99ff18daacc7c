//! Multi-scale residual refinement on top of an initial field.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::refine::unet::{UNet3DConfig, UNetParams};
use crate::scalar::Scalar;
use crate::volume::Volume;

pub const OUTPUT_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Three nets at scales 1/4, 1/2, 1.
    #[default]
    Cascade,
    /// One net at full resolution.
    Single,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    #[default]
    Compose,
    Add,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Only the full-resolution residual is multiplied by `output_scale`.
    #[default]
    FinestResidual,
    AllResiduals,
}

impl Variant {
    pub fn scales(self) -> Vec<f64> {
        match self {
            Variant::Cascade => vec![0.25, 0.5, 1.0],
            Variant::Single => vec![1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub unet: UNet3DConfig,
    pub variant: Variant,
    pub update_mode: UpdateMode,
    pub scale_mode: ScaleMode,
    pub output_scale: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            unet: UNet3DConfig::default(),
            variant: Variant::Cascade,
            update_mode: UpdateMode::Compose,
            scale_mode: ScaleMode::FinestResidual,
            output_scale: OUTPUT_SCALE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineCascade<T> {
    pub config: CascadeConfig,
    pub scales: Vec<f64>,
    pub nets: Vec<UNetParams<T>>,
}

pub fn init_cascade<T: Scalar>(config: &CascadeConfig, seed: u64) -> Result<RefineCascade<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = config.variant.scales();
    let nets = scales.iter().map(|_| UNetParams::init(&config.unet, &mut rng)).collect::<Result<_>>()?;
    Ok(RefineCascade { config: config.clone(), scales, nets })
}

/// Graph nodes produced by one cascade evaluation.
pub struct CascadeOutput {
    /// `phi_1 .. phi_T` at full resolution.
    pub fields: Vec<Var>,
    /// `I_A ∘ phi_t` for `t = 1 .. T`.
    pub warps: Vec<Var>,
}

impl<T: Scalar> RefineCascade<T> {
    pub fn stages(&self) -> usize {
        self.nets.len()
    }

    /// Every parameter tensor across all nets, in order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nets.iter().flat_map(|n| n.tensors.iter().map(|(_, t)| t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.nets.iter_mut().flat_map(|n| n.tensors.iter_mut().map(|(_, t)| t))
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(UNetParams::len).sum()
    }

    /// Binds all parameters; returns one var list per net.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Vec<Var>> {
        self.nets.iter().map(|n| n.bind(tape)).collect()
    }

    /// `phi_t = phi_{t-1} ∘ Upsample(g_t(I_A ∘ phi_{t-1}, I_B))` for each stage.
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Vec<Var>], phi0: Var, moving: Var, fixed: Var) -> Result<CascadeOutput> {
        if params.len() != self.nets.len() {
            return Err(Error::invalid(format!("{} parameter groups for {} nets", params.len(), self.nets.len())));
        }
        let dims = tape.value(moving).spatial();
        if tape.value(fixed).spatial() != dims || tape.value(phi0).spatial() != dims {
            return Err(Error::shape("cascade inputs must share spatial dims"));
        }
        let mut phi = phi0;
        let mut warped = tape.warp(moving, phi)?;
        let mut fields = Vec::with_capacity(self.nets.len());
        let mut warps = Vec::with_capacity(self.nets.len());
        let last = self.scales.len() - 1;
        for (t, (net, &s)) in self.nets.iter().zip(&self.scales).enumerate() {
            let factor = (1.0 / s).round() as usize;
            let (a, b) = if factor > 1 {
                let coarse = dims.map(|d| d.div_ceil(factor));
                if coarse.contains(&0) {
                    return Err(Error::invalid(format!("scale {s} yields an empty grid from {dims:?}")));
                }
                (tape.avg_pool(warped, factor)?, tape.avg_pool(fixed, factor)?)
            } else {
                (warped, fixed)
            };
            let x = tape.concat_channels(&[a, b])?;
            let mut r = net.forward(tape, &params[t], x)?;
            let scaled = match self.config.scale_mode {
                ScaleMode::FinestResidual => t == last,
                ScaleMode::AllResiduals => true,
            };
            if scaled {
                r = tape.scale(r, self.config.output_scale);
            }
            if factor > 1 {
                r = tape.upsample_field(r, dims)?;
            }
            phi = match self.config.update_mode {
                UpdateMode::Compose => tape.compose(phi, r)?,
                UpdateMode::Add => tape.add(phi, r)?,
            };
            warped = tape.warp(moving, phi)?;
            fields.push(phi);
            warps.push(warped);
        }
        Ok(CascadeOutput { fields, warps })
    }

    /// Concrete evaluation without gradient tracking; returns the final field.
    pub fn apply(&self, phi0: &DisplacementField<T>, moving: &Volume<T>, fixed: &Volume<T>) -> Result<DisplacementField<T>> {
        let mut tape = Tape::new();
        let params: Vec<Vec<Var>> =
            self.nets.iter().map(|n| n.tensors.iter().map(|(_, t)| tape.constant(t.clone())).collect()).collect();
        let p = tape.constant(phi0.to_tensor());
        let a = tape.constant(moving.to_tensor());
        let b = tape.constant(fixed.to_tensor());
        let out = self.forward(&mut tape, &params, p, a, b)?;
        let last = *out.fields.last().expect("at least one stage");
        Ok(DisplacementField::from_tensor(tape.value(last))?.with_spacing(phi0.spacing()))
    }

    fn tags(&self) -> BTreeMap<String, serde_json::Value> {
        let mut tags = BTreeMap::new();
        tags.insert("variant".into(), serde_json::to_value(self.config.variant).expect("enum"));
        tags.insert("update_mode".into(), serde_json::to_value(self.config.update_mode).expect("enum"));
        tags.insert("scale_mode".into(), serde_json::to_value(self.config.scale_mode).expect("enum"));
        tags.insert("scales".into(), serde_json::to_value(&self.scales).expect("floats"));
        tags.insert("cascade_config".into(), serde_json::to_value(&self.config).expect("config"));
        tags
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named = Vec::new();
        for (i, net) in self.nets.iter().enumerate() {
            for (name, t) in &net.tensors {
                named.push((format!("net{i}.{name}"), t));
            }
        }
        let config = serde_json::to_value(&self.config).expect("config");
        save_checkpoint(path, &named, &config, self.tags())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, params) = load_checkpoint::<T>(path)?;
        let fmt = |reason: String| Error::format(path, reason);
        let cfg = manifest.tags.get("cascade_config").ok_or_else(|| fmt("manifest lacks cascade_config".into()))?;
        let config: CascadeConfig = serde_json::from_value(cfg.clone()).map_err(|e| fmt(e.to_string()))?;
        let mut cascade = init_cascade::<T>(&config, 0)?;
        let mut it = params.into_iter();
        for (i, net) in cascade.nets.iter_mut().enumerate() {
            for (name, slot) in net.tensors.iter_mut() {
                let (got, t) = it.next().ok_or_else(|| fmt("too few parameters".into()))?;
                let want = format!("net{i}.{name}");
                if got != want || t.shape() != slot.shape() {
                    return Err(fmt(format!("parameter {got} {:?} does not match {want} {:?}", t.shape(), slot.shape())));
                }
                *slot = t;
            }
        }
        if it.next().is_some() {
            return Err(fmt("too many parameters".into()));
        }
        Ok(cascade)
    }
}
