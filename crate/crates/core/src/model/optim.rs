use std::f64::consts::PI;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// AdamW hyper-parameters with a linear-warmup cosine schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to matrices and kernels.
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, min_lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05, warmup_steps: 0, total_steps: 1 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.min_lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.min_lr.min(self.lr);
        floor + 0.5 * (self.lr - floor) * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T: Scalar> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Ok(Self { config, step: 0, m: zeros(), v: zeros() })
    }

    /// Applies one update from the stored gradients; returns the rate used.
    pub fn update(&mut self, params: &mut ParamStore<T>) -> Result<f64> {
        if self.m.len() != params.len() {
            return Err(Error::invalid("optimizer", format!("state covers {} tensors, store has {}", self.m.len(), params.len())));
        }
        let c = self.config;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr_t, eps, one) = (T::of(lr), T::of(c.eps), T::one());
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let grad = params.grad(id).clone();
            let decay = if params.value(id).rank() >= 2 { T::of(c.weight_decay) } else { T::zero() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.value_mut(id).data_mut();
            for k in 0..p.len() {
                let g = grad.data()[k];
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr_t * (mhat / (vhat.sqrt() + eps) + decay * p[k]);
            }
        }
        Ok(lr)
    }
}
