//! Adam with linear learning-rate warmup.

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning rate at step `t` (1-based): `base * min(1, t / warmup)`.
pub fn warmup_lr(base_lr: f64, warmup_steps: u64, t: u64) -> f64 {
    if warmup_steps == 0 {
        base_lr
    } else {
        base_lr * (t as f64 / warmup_steps as f64).min(1.0)
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = [usize; 5]>, config: AdamConfig) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        AdamState { config, m, v, t: 0 }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update in place and returns the effective learning rate.
    ///
    /// Non-finite gradients leave both `params` and the state untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], base_lr: f64, warmup_steps: u64) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape(format!("adam: parameter {i} shape changed")));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.t += 1;
        let lr = warmup_lr(base_lr, warmup_steps, self.t);
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, gv) in g.data().iter().enumerate() {
                let gv = gv.as_f64();
                let mi = beta1 * md[i].as_f64() + (1.0 - beta1) * gv;
                let vi = beta2 * vd[i].as_f64() + (1.0 - beta2) * gv * gv;
                md[i] = T::lit(mi);
                vd[i] = T::lit(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                pd[i] = T::lit(pd[i].as_f64() - update);
            }
        }
        Ok(lr)
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    base_lr: f64,
    warmup_steps: u64,
) -> Result<f64> {
    state.step(params, grads, base_lr, warmup_steps)
}
