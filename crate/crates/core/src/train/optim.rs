//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear warmup to `base` over `warmup` steps, then cosine decay to zero
/// at `total`. With `total == 0` the rate stays at `base` after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, warmup: 0, total: 0 }
    }

    /// Rate for 1-based `step`.
    pub fn at(&self, step: u64) -> f64 {
        if step <= self.warmup && self.warmup > 0 {
            return self.base * step as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return self.base;
        }
        let progress = ((step - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-prefix learning-rate multipliers; the first matching prefix wins.
    #[serde(default)]
    pub lr_multipliers: Vec<(String, f64)>,
}

impl AdamWConfig {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.001,
            lr_multipliers: Vec::new(),
        }
    }

    fn multiplier(&self, name: &str) -> f64 {
        self.lr_multipliers.iter().find(|(p, _)| name.starts_with(p.as_str())).map_or(1.0, |&(_, m)| m)
    }
}

/// Optimizer moments and step count.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    /// One update of `params` in place.
    ///
    /// Weight decay applies to matrices only (rank ≥ 2). A non-finite
    /// gradient rejects the whole step and leaves everything untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shapes("optimizer_step", p.shape(), g.shape()));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at entry {i} is {}", g.data()[i])));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let eps = T::lit(c.eps);
        for (name, p) in params.iter_mut() {
            let lr = c.schedule.at(self.step) * c.multiplier(name);
            let g = grads.get(name)?;
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(p.shape()));
                self.v.insert(name, Tensor::zeros(p.shape()));
            }
            let decay = if p.rank() >= 2 { T::lit(lr * c.weight_decay) } else { T::zero() };
            let step_size = T::lit(lr / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *x -= decay * *x;
                *x -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
