//! Adam with bias correction and a constant learning rate.

use cats_autodiff::{Element, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{CatsError, Result};
use crate::params::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers per trainable parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
}

impl<T: Element> AdamState<T> {
    /// Zero moments for every gradient-tracking parameter.
    pub fn new(config: AdamConfig, params: &ParameterSet<T>) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::ZERO; t.numel()];
        let trainable: Vec<_> = params.iter().filter(|(_, t)| t.requires_grad()).collect();
        Self {
            config,
            t: 0,
            m: trainable.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
            v: trainable.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
        }
    }
}

/// One Adam update of every trainable parameter from its accumulated gradient.
/// Gradients are left in place; clearing them is the caller's job.
pub fn adam_step<T: Element>(params: &mut ParameterSet<T>, state: &mut AdamState<T>) -> Result<()> {
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.t + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let mut updates = Vec::with_capacity(state.m.len());
    for (name, m) in state.m.iter_mut() {
        let p = params.get(name)?;
        let grad = p
            .grad()
            .ok_or_else(|| CatsError::Numerical(format!("trainable parameter `{}` received no gradient", name)))?;
        let v = state.v.get_mut(name).expect("moment buffers share keys");
        if m.len() != grad.len() {
            return Err(CatsError::Data(format!("moment buffer for `{}` has the wrong length", name)));
        }
        let mut data = p.to_vec();
        for i in 0..data.len() {
            let g = grad[i].to_f64();
            let mi = beta1 * m[i].to_f64() + (1.0 - beta1) * g;
            let vi = beta2 * v[i].to_f64() + (1.0 - beta2) * g * g;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            data[i] = T::from_f64(data[i].to_f64() - step);
        }
        updates.push((name.clone(), Tensor::variable(data, p.shape())?));
    }
    for (name, tensor) in updates {
        params.replace(&name, tensor)?;
    }
    state.t = t;
    Ok(())
}
