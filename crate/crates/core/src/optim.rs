//! ADAM with L2 weight decay folded into the gradient, and the step-decay
//! learning-rate schedule.

use crate::encoder::{EncoderParams, ParamGrads};
use crate::error::{PdlError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: EncoderParams,
    second: EncoderParams,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: EncoderParams::zeros(params.shape),
            second: EncoderParams::zeros(params.shape),
        }
    }

    pub fn first_moment(&self) -> &EncoderParams {
        &self.first
    }

    pub fn second_moment(&self) -> &EncoderParams {
        &self.second
    }
}

/// One ADAM update over a flat slice. `step` is the 1-based step index used
/// for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    (beta1, beta2, eps): (f64, f64, f64),
    lr: f64,
    weight_decay: f64,
) {
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        first[i] = beta1 * first[i] + (1.0 - beta1) * g;
        second[i] = beta2 * second[i] + (1.0 - beta2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub fn adam_step(
    params: &mut EncoderParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(PdlError::Argument(format!("learning rate must be > 0, got {lr}")));
    }
    if !params.same_layout(grads) || !params.same_layout(&state.first) {
        return Err(PdlError::Argument(
            "gradient/optimizer shapes do not match parameters".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(PdlError::numeric("adam_step", "non-finite gradient"));
    }
    state.step += 1;
    let consts = (state.beta1, state.beta2, state.eps);
    let step = state.step;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut())
        .zip(state.second.tensors_mut())
    {
        adam_update(p, g, m, v, step, consts, lr, weight_decay);
    }
    Ok(())
}

/// `base * 10^-(epoch / step_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub step_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 0.00035,
            step_epochs: 20,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.base / 10f64.powi((epoch / self.step_epochs.max(1)) as i32)
    }
}
