//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{dim_err, M2ktError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
}

impl OptimState {
    pub fn new(param_count: usize) -> Self {
        Self {
            first_moment: Tensor::zeros(&[param_count]),
            second_moment: Tensor::zeros(&[param_count]),
            step_count: 0,
        }
    }
}

/// One optimizer update in place. A gradient containing NaN/Inf is refused
/// and leaves both `params` and `state` untouched.
pub fn optimizer_step(
    kind: OptimizerKind,
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.first_moment.len() != params.len() {
        return dim_err(format!(
            "optimizer: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(M2ktError::Numeric(format!("gradient coordinate {i} is not finite")));
    }
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
            state.step_count += 1;
        }
        OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            let t = state.step_count + 1;
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            let m = state.first_moment.data_mut();
            for (mi, &g) in m.iter_mut().zip(grads) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
            }
            let v = state.second_moment.data_mut();
            for (vi, &g) in v.iter_mut().zip(grads) {
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            }
            let m = state.first_moment.data();
            let v = state.second_moment.data();
            for ((p, &mi), &vi) in params.iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            state.step_count = t;
        }
    }
    Ok(())
}

/// Adam with the standard constants (β1 = 0.9, β2 = 0.999, ε = 1e-8).
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimState, lr: f64) -> Result<()> {
    optimizer_step(OptimizerKind::default(), params, grads, state, lr)
}
