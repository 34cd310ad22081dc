//! Adam with bias correction, one moment pair per learnable tensor.

use std::collections::BTreeMap;

use crate::autograd::GradientSet;
use crate::model::{NetworkModel, ParamId};
use crate::tensor::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<ParamId, Vec<T>>,
    pub v: BTreeMap<ParamId, Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like every learnable tensor of `model`.
    pub fn new(model: &NetworkModel<T>) -> Self {
        let zeros = |id: &ParamId| (*id, vec![T::zero(); model.param(*id).len()]);
        let ids = model.param_ids();
        Self {
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// Bias-correction divisors `(1 − β1^t, 1 − β2^t)` for step `t ≥ 1`.
fn corrections(beta1: f64, beta2: f64, t: u64) -> (f64, f64) {
    let t = t as i32;
    (1.0 - beta1.powi(t), 1.0 - beta2.powi(t))
}

/// One Adam update of a single tensor. `t` is the already-incremented step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let (bc1, bc2) = corrections(beta1, beta2, t);
    let c = T::from_f64_lossy;
    let (b1, b2, one_b1, one_b2) = (c(beta1), c(beta2), c(1.0 - beta1), c(1.0 - beta2));
    let (bc1, bc2, lr, eps) = (c(bc1), c(bc2), c(lr), c(epsilon));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + one_b1 * g;
        v[i] = b2 * v[i] + one_b2 * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Advance the step counter and update every learnable tensor of `model`.
pub fn adam_step<T: Scalar>(model: &mut NetworkModel<T>, grads: &GradientSet<T>, state: &mut AdamState<T>, lr: f64) {
    state.t += 1;
    for (id, g) in grads.iter() {
        let m = state.m.get_mut(id).expect("moment for every parameter");
        let v = state.v.get_mut(id).expect("moment for every parameter");
        adam_update(model.param_mut(*id), g, m, v, state.t, lr, state.beta1, state.beta2, state.epsilon);
    }
}
