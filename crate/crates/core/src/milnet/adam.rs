use super::params::{Gradients, ModelParams};
use super::HyperParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected ADAM update at step `t >= 1`. The L2 term
/// `weight_decay * theta` is added to the gradient before the moments.
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    weight_decay: f64,
    t: u64,
) {
    assert!(t >= 1, "adam step counter starts at 1");
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i] + weight_decay * theta[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, hyper: &HyperParams) {
    assert_eq!(params.data.len(), grads.data.len());
    state.t += 1;
    adam_update(&mut params.data, &grads.data, &mut state.m, &mut state.v, hyper.lr, hyper.weight_decay, state.t);
}
