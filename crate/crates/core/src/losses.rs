//! Similarity and regularization terms.
//!
//! Similarity is Gaussian-windowed local normalized cross-correlation (LNCC);
//! the minimized similarity loss is `-LNCC`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::scalar::Scalar;
use crate::volume::Volume;

/// Variance guard added to each local variance.
pub const LNCC_EPS: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_LNCC_WINDOW: usize = 9;
pub const DEFAULT_GATE_WINDOW: usize = 11;
pub const DEFAULT_TAU: f64 = 0.4;
pub const DEFAULT_GATE_DOWN: usize = 4;

/// Truncation radius and standard deviation of the window kernel.
pub fn window_kernel(window: usize) -> Result<(usize, f64)> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("LNCC window must be odd, got {window}")));
    }
    Ok(((window - 1) / 2, window as f64 / 4.0))
}

impl<T: Scalar> Tape<T> {
    /// Per-voxel LNCC map of two single-channel tensors.
    pub fn lncc_map(&mut self, a: Var, b: Var, window: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("lncc: {sa:?} vs {sb:?}")));
        }
        let (r, sigma) = window_kernel(window)?;
        let mu_a = self.gaussian_filter(a, r, sigma);
        let mu_b = self.gaussian_filter(b, r, sigma);
        let aa = self.square(a);
        let bb = self.square(b);
        let ab = self.mul(a, b)?;
        let s_aa = self.gaussian_filter(aa, r, sigma);
        let s_bb = self.gaussian_filter(bb, r, sigma);
        let s_ab = self.gaussian_filter(ab, r, sigma);
        let mu_aa = self.square(mu_a);
        let mu_bb = self.square(mu_b);
        let mu_ab = self.mul(mu_a, mu_b)?;
        let var_a = self.sub(s_aa, mu_aa)?;
        let var_b = self.sub(s_bb, mu_bb)?;
        let cov = self.sub(s_ab, mu_ab)?;
        let var_a = self.unary(var_a, Unary::AddScalar(LNCC_EPS));
        let var_b = self.unary(var_b, Unary::AddScalar(LNCC_EPS));
        let denom = self.mul(var_a, var_b)?;
        let inv = self.unary(denom, Unary::Powf(-0.5));
        self.mul(cov, inv)
    }

    /// Mean LNCC, a scalar node in `[-1, 1]`.
    pub fn lncc(&mut self, a: Var, b: Var, window: usize) -> Result<Var> {
        let map = self.lncc_map(a, b, window)?;
        Ok(self.mean(map))
    }

    /// Mean squared forward difference of a field, averaged over the three axes.
    pub fn diffusion_reg(&mut self, u: Var) -> Result<Var> {
        let dims = self.value(u).spatial();
        let mut terms = Vec::new();
        for a in 0..3 {
            if dims[a] < 2 {
                continue;
            }
            let mut size = dims;
            size[a] -= 1;
            let mut shifted = [0; 3];
            shifted[a] = 1;
            let hi = self.crop(u, shifted, size)?;
            let lo = self.crop(u, [0; 3], size)?;
            let diff = self.sub(hi, lo)?;
            let sq = self.square(diff);
            terms.push(self.mean(sq));
        }
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(T::zero())));
        };
        let mut total = first;
        for &t in rest {
            total = self.add(total, t)?;
        }
        Ok(self.scale(total, 1.0 / 3.0))
    }
}

/// LNCC between two volumes.
pub fn lncc<T: Scalar>(a: &Volume<T>, b: &Volume<T>, window: usize) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("lncc: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(a.to_tensor());
    let y = tape.constant(b.to_tensor());
    let v = tape.lncc(x, y, window)?;
    Ok(tape.value(v).item().as_f64())
}

/// Per-voxel LNCC map.
pub fn lncc_map<T: Scalar>(a: &Volume<T>, b: &Volume<T>, window: usize) -> Result<Volume<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("lncc: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(a.to_tensor());
    let y = tape.constant(b.to_tensor());
    let m = tape.lncc_map(x, y, window)?;
    Volume::from_tensor(tape.value(m), a.spacing())
}

pub fn diffusion_reg<T: Scalar>(u: &DisplacementField<T>) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(u.to_tensor());
    let r = tape.diffusion_reg(x).expect("field crops are in bounds");
    tape.value(r).item().as_f64()
}

/// Parameters of the low-resolution modality check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub window: usize,
    pub tau: f64,
    pub down: usize,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams { window: DEFAULT_GATE_WINDOW, tau: DEFAULT_TAU, down: DEFAULT_GATE_DOWN }
    }
}

/// Low-resolution LNCC used by [`modality_gate`].
pub fn gate_lncc<T: Scalar>(a: &Volume<T>, b: &Volume<T>, params: &GateParams) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("gate: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(a.to_tensor());
    let y = tape.constant(b.to_tensor());
    let x = tape.avg_pool(x, params.down)?;
    let y = tape.avg_pool(y, params.down)?;
    let v = tape.lncc(x, y, params.window)?;
    Ok(tape.value(v).item().as_f64())
}

/// True when the pair looks cross-contrast and should go through style transfer.
pub fn modality_gate<T: Scalar>(a: &Volume<T>, b: &Volume<T>, params: &GateParams) -> Result<bool> {
    Ok(gate_lncc(a, b, params)? < params.tau)
}

/// Loss terms of one cascade evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Similarity loss `-LNCC` of each stage warp.
    pub sim: Vec<f64>,
    /// Raw LNCC of each stage warp.
    pub lncc: Vec<f64>,
    pub reg: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_parts(lncc: Vec<f64>, reg: f64, lambda: f64) -> Self {
        let sim: Vec<f64> = lncc.iter().map(|v| -v).collect();
        let total = sim.iter().sum::<f64>() + lambda * reg;
        LossReport { sim, lncc, reg, lambda, total }
    }
}

/// Graph nodes of the multi-stage loss.
pub struct LossNodes {
    pub total: Var,
    pub lncc: Vec<Var>,
    pub reg: Var,
}

impl<T: Scalar> Tape<T> {
    /// `sum_t -LNCC(warp_t, target) + lambda * reg(phi_T)`.
    pub fn total_loss(&mut self, stage_warps: &[Var], target: Var, phi_t: Var, lambda: f64, window: usize) -> Result<LossNodes> {
        if stage_warps.is_empty() {
            return Err(Error::invalid("total_loss needs at least one stage"));
        }
        let mut lncc = Vec::with_capacity(stage_warps.len());
        let mut sim_total: Option<Var> = None;
        for &w in stage_warps {
            let c = self.lncc(w, target, window)?;
            lncc.push(c);
            let s = self.neg(c);
            sim_total = Some(match sim_total {
                None => s,
                Some(acc) => self.add(acc, s)?,
            });
        }
        let reg = self.diffusion_reg(phi_t)?;
        let weighted = self.scale(reg, lambda);
        let total = self.add(sim_total.expect("non-empty"), weighted)?;
        Ok(LossNodes { total, lncc, reg })
    }

    pub fn loss_report(&self, nodes: &LossNodes, lambda: f64) -> LossReport {
        let lncc = nodes.lncc.iter().map(|&v| self.value(v).item().as_f64()).collect();
        let mut r = LossReport::from_parts(lncc, self.value(nodes.reg).item().as_f64(), lambda);
        r.total = self.value(nodes.total).item().as_f64();
        r
    }
}

/// Evaluates the multi-stage loss on concrete volumes.
pub fn total_loss<T: Scalar>(
    stage_warps: &[Volume<T>],
    target: &Volume<T>,
    phi_t: &DisplacementField<T>,
    lambda: f64,
    window: usize,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let warps: Vec<Var> = stage_warps.iter().map(|w| tape.constant(w.to_tensor())).collect();
    let tgt = tape.constant(target.to_tensor());
    let phi = tape.constant(phi_t.to_tensor());
    let nodes = tape.total_loss(&warps, tgt, phi, lambda, window)?;
    Ok(tape.loss_report(&nodes, lambda))
}
