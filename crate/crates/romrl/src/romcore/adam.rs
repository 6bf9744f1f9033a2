//! Adam optimizer on flat parameter vectors.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: DVector<f64>,
    v: DVector<f64>,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
        }
    }
}

/// One bias-corrected Adam step, in place.
pub fn adam_update(params: &mut DVector<f64>, grad: &DVector<f64>, state: &mut AdamState) {
    assert_eq!(params.len(), grad.len(), "adam: shape mismatch");
    assert_eq!(params.len(), state.m.len(), "adam: state shape mismatch");
    state.step += 1;
    let t = state.step as i32;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
}
