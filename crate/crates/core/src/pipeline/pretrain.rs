//! Offline pretraining of the refinement cascade on a pool of pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::losses::{DEFAULT_LAMBDA, DEFAULT_LNCC_WINDOW};
use crate::pipeline::optimize::{apply_update, eval_step};
use crate::refine::RefineCascade;
use crate::scalar::Scalar;
use crate::volume::Volume;

pub const DEFAULT_PRETRAIN_STEPS: usize = 1000;
pub const DEFAULT_PRETRAIN_LR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub lncc_window: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: DEFAULT_PRETRAIN_STEPS,
            lr: DEFAULT_PRETRAIN_LR,
            lambda: DEFAULT_LAMBDA,
            lncc_window: DEFAULT_LNCC_WINDOW,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainPair<T> {
    pub moving: Volume<T>,
    pub fixed: Volume<T>,
    pub phi0: DisplacementField<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub pair: usize,
    pub total: Option<f64>,
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// One Adam step per pair, visiting pairs round-robin in a seeded shuffled order.
pub fn pretrain_refiners<T: Scalar>(
    pairs: &[TrainPair<T>],
    cascade: &mut RefineCascade<T>,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&PretrainRecord),
) -> Result<Vec<PretrainRecord>> {
    if pairs.is_empty() {
        return Err(Error::invalid("pretraining needs at least one pair"));
    }
    if !(cfg.lr > 0.0) || cfg.lncc_window % 2 == 0 {
        return Err(Error::invalid("pretraining needs a positive lr and an odd window"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut adam = AdamState::new(cascade.tensors().map(Tensor::shape), cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = order[step % order.len()];
        let p = &pairs[idx];
        let mut rec = PretrainRecord { step, pair: idx, total: None, skipped: false, error: None };
        match eval_step(cascade, &p.moving, &p.fixed, &p.phi0, cfg.lambda, cfg.lncc_window, true) {
            Ok(eval) => {
                rec.total = Some(eval.report.total);
                let grads = eval.grads.expect("gradients requested");
                if let Err(e) = apply_update(cascade, &mut adam, &grads, cfg.lr, 0) {
                    if !e.is_numerical() {
                        return Err(e);
                    }
                    rec.skipped = true;
                    rec.error = Some(e.to_string());
                }
            }
            Err(e) if e.is_numerical() => {
                rec.skipped = true;
                rec.error = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Total loss of the current cascade on a pair without updating anything.
pub fn pair_loss<T: Scalar>(cascade: &RefineCascade<T>, pair: &TrainPair<T>, lambda: f64, window: usize) -> Result<f64> {
    Ok(eval_step(cascade, &pair.moving, &pair.fixed, &pair.phi0, lambda, window, false)?.report.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::{init_cascade, CascadeConfig, UNet3DConfig};
    use crate::synth::{synth_problem, Contrast};

    fn pairs(n: u64) -> Vec<TrainPair<f32>> {
        (0..n)
            .map(|s| {
                let p = synth_problem::<f32>(s, [12, 12, 12], 0.3, Contrast::Identity).unwrap();
                TrainPair { phi0: DisplacementField::zeros([12, 12, 12]), moving: p.phantom, fixed: p.fixed }
            })
            .collect()
    }

    fn cfg() -> CascadeConfig {
        CascadeConfig { unet: UNet3DConfig { base_channels: 2, depth: 2, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn zero_steps_leave_parameters() {
        let mut c = init_cascade::<f32>(&cfg(), 0).unwrap();
        let fresh = c.clone();
        let log = pretrain_refiners(&pairs(2), &mut c, &PretrainConfig { steps: 0, ..Default::default() }, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(c, fresh);
        assert!(pretrain_refiners(&[], &mut c, &PretrainConfig::default(), |_| {}).is_err());
    }

    #[test]
    fn round_robin_and_deterministic() {
        let data = pairs(3);
        let run = || {
            let mut c = init_cascade::<f32>(&cfg(), 0).unwrap();
            let log = pretrain_refiners(&data, &mut c, &PretrainConfig { steps: 6, lr: 1e-3, ..Default::default() }, |_| {}).unwrap();
            (c, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let visits: Vec<usize> = la.iter().map(|r| r.pair).collect();
        assert_eq!(visits[..3], visits[3..]);
        let mut first = visits[..3].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2]);
        assert_ne!(a, init_cascade::<f32>(&cfg(), 0).unwrap());
    }

    #[test]
    fn defaults() {
        let d = PretrainConfig::default();
        assert_eq!((d.steps, d.lr), (1000, 1e-5));
    }
}
