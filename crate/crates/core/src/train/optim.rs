use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update of every parameter that has a gradient. Decay is
/// decoupled and applied before the moment step; `step` counts from 1.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hyper: &AdamW,
    lr: f32,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::invalid("optimizer steps are counted from 1"));
    }
    let bc1 = 1.0 - (hyper.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (hyper.beta2 as f64).powi(step as i32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for (name, g) in grads {
        let w = params.get_mut(name)?;
        if w.shape() != g.shape() {
            return Err(Error::shape("adamw_step", w.shape(), g.shape()));
        }
        let n = g.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let decay = 1.0 - lr * hyper.weight_decay;
        for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *wi *= decay;
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *wi -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// `0.5·base·(1 + cos(π·step/total))`, never negative.
pub fn cosine_lr(step: u64, total: u64, base: f32) -> f32 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    (0.5 * base as f64 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0) as f32
}
