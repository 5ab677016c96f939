use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

fn check_grads(params: &ParamSet, grads: &Gradients) -> Result<()> {
    if !grads.matches(params) {
        return Err(Error::Dimension {
            expected: params.len(),
            got: grads.len(),
            context: "gradients do not match parameter layout",
        });
    }
    Ok(())
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched (their moments do not decay either).
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    check_grads(params, grads)?;
    if state.first_moment.len() != params.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            got: state.first_moment.len(),
            context: "adam state does not match parameter layout",
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for slot in 0..params.len() {
        let Some(g) = grads.slot(slot) else { continue };
        let m = state.first_moment[slot].data_mut();
        let v = state.second_moment[slot].data_mut();
        let w = params.data_mut(slot);
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent: `w <- w - lr * g`.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, learning_rate: f64) -> Result<()> {
    check_grads(params, grads)?;
    for slot in 0..params.len() {
        let Some(g) = grads.slot(slot) else { continue };
        let w = params.data_mut(slot);
        for (wi, gi) in w.iter_mut().zip(g.data()) {
            *wi -= learning_rate * gi;
        }
    }
    Ok(())
}
