//! Adam over flat parameter blocks.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `blocks` pairs each parameter slice with
/// its gradient; together they must cover exactly `state.m.len()` values.
pub fn adam_step(blocks: &mut [(&mut [f64], &[f64])], state: &mut AdamState, learning_rate: f64) {
    let total: usize = blocks.iter().map(|(p, _)| p.len()).sum();
    assert_eq!(total, state.m.len(), "parameter count changed under the optimizer");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let mut offset = 0;
    for (params, grad) in blocks.iter_mut() {
        assert_eq!(params.len(), grad.len());
        let m = &mut state.m[offset..offset + params.len()];
        let v = &mut state.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grad[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
        }
        offset += params.len();
    }
}
