//! Adam with decoupled weight decay, and a polynomial learning-rate decay.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use qfss_autograd::{ParamStore, Scalar};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter named in `grads`; others are untouched.
    ///
    /// `p ← p − lr · (m̂ / (√v̂ + eps) + wd · p)`
    pub fn step<G: Scalar>(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &BTreeMap<String, ArrayD<G>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let AdamWConfig { weight_decay, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient of `{name}` is {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(p.raw_dim()), ArrayD::zeros(p.raw_dim())));
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g.as_f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps) + weight_decay * *p as f64;
                *p = (*p as f64 - lr * update) as f32;
            });
        }
        Ok(())
    }
}

/// `base · (1 − iter / max_iter)^power`, zero from `max_iter` on.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 || iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}
