//! Per-pair instance optimization of the refinement cascade.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{ndv, DisplacementField};
use crate::losses::{GateParams, LossReport, DEFAULT_LAMBDA, DEFAULT_LNCC_WINDOW};
use crate::metrics::{dice, warp_labels_with, LabelInterp};
use crate::refine::{CascadeConfig, RefineCascade};
use crate::scalar::Scalar;
use crate::volume::{LabelMap, Volume};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_LR: f64 = 5e-4;
pub const DEFAULT_WARMUP: u64 = 10;
pub const DEFAULT_DICE_EVERY: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IOConfig {
    pub steps: usize,
    pub base_lr: f64,
    pub warmup: u64,
    pub lambda: f64,
    pub lncc_window: usize,
    pub gate: GateParams,
    pub seed: u64,
    pub cascade: CascadeConfig,
    /// Dice is recorded when `step % dice_every == 0`; 0 disables it.
    pub dice_every: usize,
    pub label_interp: LabelInterp,
    pub adam: AdamConfig,
    /// Record wall-clock time per step; when off `elapsed_ms` is written as 0.
    pub timing: bool,
}

impl Default for IOConfig {
    fn default() -> Self {
        IOConfig {
            steps: DEFAULT_STEPS,
            base_lr: DEFAULT_LR,
            warmup: DEFAULT_WARMUP,
            lambda: DEFAULT_LAMBDA,
            lncc_window: DEFAULT_LNCC_WINDOW,
            gate: GateParams::default(),
            seed: 0,
            cascade: CascadeConfig::default(),
            dice_every: DEFAULT_DICE_EVERY,
            label_interp: LabelInterp::default(),
            adam: AdamConfig::default(),
            timing: true,
        }
    }
}

impl IOConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if !(self.gate.tau > -1.0 && self.gate.tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (-1, 1), got {}", self.gate.tau)));
        }
        for (name, w) in [("lncc_window", self.lncc_window), ("gate window", self.gate.window)] {
            if w % 2 == 0 {
                return Err(Error::invalid(format!("{name} must be odd, got {w}")));
            }
        }
        if self.gate.down == 0 {
            return Err(Error::invalid("gate downsampling factor must be >= 1"));
        }
        if !(self.base_lr > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::invalid("base_lr must be positive and lambda non-negative"));
        }
        self.cascade.unet.validate()
    }
}

/// One line of the trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sim: Vec<f64>,
    pub reg: f64,
    pub total: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<f64>,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IOTrace {
    pub steps: Vec<StepRecord>,
    pub gate_fired: bool,
    pub gate_lncc: Option<f64>,
    /// Index into `steps` of the returned field.
    pub best_step: usize,
    pub selection: String,
    pub final_ndv: f64,
    pub error: Option<String>,
}

impl IOTrace {
    pub fn to_jsonl(&self) -> String {
        self.steps.iter().map(|s| serde_json::to_string(s).expect("record serializes") + "\n").collect()
    }
}

pub struct IOResult<T> {
    pub phi: DisplacementField<T>,
    pub trace: IOTrace,
}

/// Volumes the similarity terms are computed on, plus optional labels for Dice.
pub struct IOInputs<'a, T> {
    pub moving: &'a Volume<T>,
    pub fixed: &'a Volume<T>,
    pub phi0: &'a DisplacementField<T>,
    pub labels: Option<(&'a LabelMap, &'a LabelMap)>,
}

pub(crate) struct StepEval<T> {
    pub report: LossReport,
    pub phi: Tensor<T>,
    pub grads: Option<Vec<Tensor<T>>>,
}

/// One forward pass of cascade + loss, with gradients when `with_grad`.
pub(crate) fn eval_step<T: Scalar>(
    cascade: &RefineCascade<T>,
    moving: &Volume<T>,
    fixed: &Volume<T>,
    phi0: &DisplacementField<T>,
    lambda: f64,
    window: usize,
    with_grad: bool,
) -> Result<StepEval<T>> {
    let mut tape = Tape::new();
    let params = if with_grad {
        cascade.bind(&mut tape)
    } else {
        cascade.nets.iter().map(|n| n.tensors.iter().map(|(_, t)| tape.constant(t.clone())).collect()).collect()
    };
    let p0 = tape.constant(phi0.to_tensor());
    let a = tape.constant(moving.to_tensor());
    let b = tape.constant(fixed.to_tensor());
    let out = cascade.forward(&mut tape, &params, p0, a, b)?;
    let phi_t = *out.fields.last().expect("at least one stage");
    let nodes = tape.total_loss(&out.warps, b, phi_t, lambda, window)?;
    let report = tape.loss_report(&nodes, lambda);
    let phi = tape.value(phi_t).clone();
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("total loss {}", report.total)));
    }
    let grads = if with_grad {
        let mut g = tape.backward(nodes.total)?;
        let vars: Vec<Var> = params.into_iter().flatten().collect();
        Some(vars.into_iter().map(|v| g.take_or_zeros(v, tape.shape(v))).collect())
    } else {
        None
    };
    Ok(StepEval { report, phi, grads })
}

pub(crate) fn apply_update<T: Scalar>(cascade: &mut RefineCascade<T>, adam: &mut AdamState<T>, grads: &[Tensor<T>], lr: f64, warmup: u64) -> Result<f64> {
    let mut flat: Vec<Tensor<T>> = cascade.tensors().cloned().collect();
    let eff = adam.step(&mut flat, grads, lr, warmup)?;
    for (slot, t) in cascade.tensors_mut().zip(flat) {
        *slot = t;
    }
    Ok(eff)
}

fn mean_dice<T: Scalar>(labels: (&LabelMap, &LabelMap), phi: &DisplacementField<T>, interp: LabelInterp) -> Result<Option<f64>> {
    let (moving, fixed) = labels;
    let warped = warp_labels_with(moving, phi, interp)?;
    Ok(dice(&warped, fixed, &fixed.classes())?.mean)
}

/// Optimizes the cascade parameters on one pair; the backbone field stays fixed.
///
/// Returns the field of the lowest recorded total loss. A non-finite loss or
/// gradient stops the loop; the best finite state so far is returned with the
/// message stored in `trace.error`.
pub fn instance_optimize<T: Scalar>(
    inputs: &IOInputs<'_, T>,
    cascade: &mut RefineCascade<T>,
    cfg: &IOConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<IOResult<T>> {
    cfg.validate()?;
    let dims = inputs.moving.dims();
    if inputs.fixed.dims() != dims || inputs.phi0.dims() != dims {
        return Err(Error::shape("instance_optimize inputs must share dims"));
    }
    let mut adam = AdamState::new(cascade.tensors().map(Tensor::shape), cfg.adam);
    let mut trace = IOTrace { selection: "best_loss".into(), ..Default::default() };
    let mut best: Option<(f64, Tensor<T>)> = None;
    for step in 0..cfg.steps {
        let start = Instant::now();
        let eval = match eval_step(cascade, inputs.moving, inputs.fixed, inputs.phi0, cfg.lambda, cfg.lncc_window, true) {
            Ok(e) => e,
            Err(e) if e.is_numerical() => {
                trace.error = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let phi = DisplacementField::from_tensor(&eval.phi)?.with_spacing(inputs.phi0.spacing());
        let dice = match inputs.labels {
            Some(l) if cfg.dice_every > 0 && step % cfg.dice_every == 0 => mean_dice(l, &phi, cfg.label_interp)?,
            _ => None,
        };
        if best.as_ref().is_none_or(|(b, _)| eval.report.total < *b) {
            best = Some((eval.report.total, eval.phi));
            trace.best_step = step;
        }
        let grads = eval.grads.expect("gradients requested");
        let update = apply_update(cascade, &mut adam, &grads, cfg.base_lr, cfg.warmup);
        let lr = match update {
            Ok(lr) => lr,
            Err(e) if e.is_numerical() => {
                trace.error = Some(e.to_string());
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        let elapsed_ms = if cfg.timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        let rec = StepRecord { step, sim: eval.report.sim, reg: eval.report.reg, total: eval.report.total, lr, dice, elapsed_ms };
        on_step(&rec);
        trace.steps.push(rec);
        if trace.error.is_some() {
            break;
        }
    }
    let phi = match best {
        Some((_, t)) => DisplacementField::from_tensor(&t)?.with_spacing(inputs.phi0.spacing()),
        None => inputs.phi0.clone(),
    };
    trace.final_ndv = ndv(&phi)?;
    Ok(IOResult { phi, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::total_loss;
    use crate::refine::{init_cascade, UNet3DConfig};
    use crate::synth::{synth_problem, Contrast};

    fn small_cfg(steps: usize) -> IOConfig {
        IOConfig {
            steps,
            cascade: CascadeConfig { unet: UNet3DConfig { base_channels: 4, depth: 2, ..Default::default() }, ..Default::default() },
            timing: false,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_matches_loss_at_phi0_and_backbone_is_frozen() {
        let p = synth_problem::<f32>(0, [16, 16, 16], 0.3, Contrast::Identity).unwrap();
        let cfg = small_cfg(4);
        let mut c = init_cascade::<f32>(&cfg.cascade, 1).unwrap();
        let phi0 = p.true_field.clone();
        let inputs = IOInputs { moving: &p.phantom, fixed: &p.fixed, phi0: &phi0, labels: Some((&p.labels, &p.fixed_labels)) };
        let mut seen = 0;
        let r = instance_optimize(&inputs, &mut c, &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        assert_eq!(r.trace.steps.len(), 4);
        assert_eq!(phi0.data(), p.true_field.data());
        let w = crate::field::warp(&p.phantom, &phi0).unwrap();
        let want = total_loss(&[w.clone(), w.clone(), w], &p.fixed, &phi0, 0.1, 9).unwrap().total;
        let got = r.trace.steps[0].total;
        assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
        let min = r.trace.steps.iter().map(|s| s.total).fold(f64::INFINITY, f64::min);
        assert_eq!(r.trace.steps[r.trace.best_step].total, min);
        assert!(r.trace.steps[0].dice.is_some() && r.trace.steps[1].dice.is_none());
        assert_eq!(r.trace.steps[0].lr, 5e-5);
    }

    #[test]
    fn deterministic_traces() {
        let p = synth_problem::<f32>(3, [16, 16, 16], 0.3, Contrast::Identity).unwrap();
        let cfg = small_cfg(3);
        let run = || {
            let mut c = init_cascade::<f32>(&cfg.cascade, 2).unwrap();
            let z = DisplacementField::zeros([16, 16, 16]);
            let inputs = IOInputs { moving: &p.phantom, fixed: &p.fixed, phi0: &z, labels: None };
            let r = instance_optimize(&inputs, &mut c, &cfg, |_| {}).unwrap();
            (r.trace.to_jsonl(), r.phi.data().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        assert!(IOConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(IOConfig { lncc_window: 8, ..Default::default() }.validate().is_err());
        let mut c = IOConfig::default();
        c.gate.tau = 1.0;
        assert!(c.validate().is_err());
        let d = IOConfig::default();
        assert_eq!((d.steps, d.base_lr, d.warmup, d.lambda, d.lncc_window, d.gate.window, d.gate.tau), (50, 5e-4, 10, 0.1, 9, 11, 0.4));
        assert_eq!(d.cascade.output_scale, 0.05);
    }
}
