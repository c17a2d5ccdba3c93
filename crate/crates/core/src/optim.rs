//! ADAM with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Moment buffers for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.dims().to_vec()))
                .collect()
        };
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// The displacement one update would apply, advancing the moments.
    pub fn direction(&mut self, params: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            let missing = params
                .names()
                .get(grads.len().min(params.len()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Invalid(format!(
                "adam: {} gradients for {} parameters (first unmatched: {missing})",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.dims() != g.dims() {
                return Err(Error::Invalid(format!(
                    "adam: gradient for {name} has dims {:?}, parameter has {:?}",
                    g.dims(),
                    p.dims()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let step_size = T::from_f64_lossy(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        let mut out = Vec::with_capacity(grads.len());
        for ((m, v), g) in self.m.iter_mut().zip(&mut self.v).zip(grads) {
            let mut d = Vec::with_capacity(g.numel());
            for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                d.push(-step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps));
            }
            out.push(Tensor::new(g.dims().to_vec(), d)?);
        }
        Ok(out)
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        let delta = self.direction(params, grads)?;
        apply_delta(params, &delta);
        Ok(())
    }
}

/// `params += delta`
pub fn apply_delta<T: Real>(params: &mut ParamStore<T>, delta: &[Tensor<T>]) {
    for (p, d) in params.values_mut().iter_mut().zip(delta) {
        for (a, &b) in p.data_mut().iter_mut().zip(d.data()) {
            *a = *a + b;
        }
    }
}
