//! Adam with L2 weight decay and a step-halving schedule, plus a batch
//! trainer that is deterministic for a fixed seed.

use alloc::format;
use alloc::vec::Vec;

use crate::losses::{LossParts, LossWeights};
use crate::numerics::{Grads, ParamSet, Prng, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of the run after which the learning rate halves
    /// (20 of 100 epochs by default).
    pub halve_fraction: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            halve_fraction: 0.2,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 || !(self.halve_fraction > 0.0) {
            return Err(Error::Config(format!("bad optimiser settings {self:?}")));
        }
        Ok(())
    }

    /// Epochs between halvings: the default schedule scaled to `epochs`.
    pub fn halve_every(&self) -> usize {
        (libm::round(self.epochs as f64 * self.halve_fraction) as usize).max(1)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * libm::pow(0.5, (epoch / self.halve_every()) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        for (((p, g), m), v) in params.tensors_mut().zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g + cfg.weight_decay * *w;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= lr * (*m / c1) / (libm::sqrt(*v / c2) + cfg.eps);
            }
        }
    }
}

/// Per-sample result handed back by a gradient callback.
pub struct SampleGrad {
    pub parts: LossParts,
    pub total: f64,
    pub grads: Grads,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-mean total loss, measured on each batch before its update.
    pub loss: f64,
    pub parts: LossParts,
}

/// Runs `cfg.epochs` epochs over `n_samples` samples.
///
/// `batch_grads` returns one result per requested sample id, in order; it
/// may evaluate them in parallel. Gradients are summed in batch order, so
/// the run is deterministic whatever the callback's scheduling.
pub fn train<F, E>(
    params: &mut ParamSet,
    n_samples: usize,
    cfg: &TrainConfig,
    mut batch_grads: F,
    mut on_epoch: E,
) -> Result<Vec<EpochStats>>
where
    F: FnMut(&ParamSet, &[usize]) -> Result<Vec<SampleGrad>>,
    E: FnMut(&EpochStats, &ParamSet),
{
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::EmptyInput("training set"));
    }
    let mut adam = Adam::new(params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n_samples).collect();
        Prng::stream(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        let mut parts = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            let results = batch_grads(params, batch)?;
            if results.len() != batch.len() {
                return Err(Error::shape("batch gradients", batch.len(), results.len()));
            }
            let mut acc = Grads::zeros_like(params);
            for (r, &id) in results.iter().zip(batch) {
                if !r.total.is_finite() || !r.grads.is_finite() {
                    return Err(Error::NonFinite(format!("loss or gradient of sample {id} in epoch {epoch}")));
                }
                sum += r.total;
                parts.chamfer += r.parts.chamfer;
                parts.correspondence += r.parts.correspondence;
                parts.deformation += r.parts.deformation;
                parts.sparsity += r.parts.sparsity;
                acc.add_assign(&r.grads);
            }
            acc.scale(1.0 / batch.len() as f64);
            adam.step(params, &acc, lr, cfg);
        }
        let k = n_samples as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: sum / k,
            parts: LossParts {
                chamfer: parts.chamfer / k,
                correspondence: parts.correspondence / k,
                deformation: parts.deformation / k,
                sparsity: parts.sparsity / k,
            },
        };
        on_epoch(&stats, params);
        curve.push(stats);
    }
    Ok(curve)
}
