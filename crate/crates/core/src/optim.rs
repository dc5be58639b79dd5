//! Adam with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use crate::warm::{ParamGrads, WarmParams};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// First moments, laid out like [`WarmParams::to_flat`].
    pub m: Vec<f64>,
    /// Second moments.
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        Self { m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn for_params(params: &WarmParams) -> Self {
        Self::new(params.to_flat().len())
    }
}

/// One AdamW step on flat vectors:
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64, weight_decay: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, t as f64);
    let decay = 1.0 - lr * weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * decay - lr * m_hat / (libm::sqrt(v_hat) + state.eps);
    }
}

/// Pure form of [`adamw_step`] over model parameters.
pub fn apply_update(
    params: &WarmParams,
    grads: &ParamGrads,
    state: &OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> (WarmParams, OptimizerState) {
    let mut flat = params.to_flat();
    let mut next = state.clone();
    adamw_step(&mut flat, &grads.to_flat(), &mut next, lr, weight_decay);
    (params.with_flat(&flat), next)
}
