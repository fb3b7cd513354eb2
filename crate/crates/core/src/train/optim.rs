use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Also decay rank-1 tensors (norm affine terms and biases).
    pub decay_all: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05, decay_all: false }
    }
}

#[derive(Clone)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl<T: Element> OptimState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.dims().to_vec())).collect();
        OptimState { m: zeros(), v: zeros(), step: 0, config }
    }
}

/// One decoupled-decay AdamW update with bias correction.
pub fn adamw_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.tensors().len() {
        return Err(Error::Usage(format!("{} gradients for {} parameters", grads.len(), params.tensors().len())));
    }
    for (s, g) in params.specs().iter().zip(grads) {
        if g.dims() != s.dims.as_slice() {
            return Err(Error::shape("adamw", format!("gradient {:?} for `{}` {:?}", g.dims(), s.name, s.dims)));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter `{}`", s.name)));
        }
    }
    state.step += 1;
    let c = state.config.clone();
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
    let (lr_t, eps) = (T::from_f64(lr), T::from_f64(c.eps));
    let decays: Vec<bool> = params.specs().iter().map(|s| c.decay_all || s.decay).collect();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let shrink = T::from_f64(if decays[i] { 1.0 - lr * c.weight_decay } else { 1.0 });
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + ob1 * g[k];
            v[k] = b2 * v[k] + ob2 * g[k] * g[k];
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            *x = *x * shrink - lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}
