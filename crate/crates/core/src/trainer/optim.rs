//! AdamW with decoupled weight decay, and the linear warmup/decay schedule.

use super::model::{Gradients, ModelParams};
use super::{Result, TrainConfig, TrainError};

/// Learning rate at 1-based `step`.
///
/// With `W = round(warmup_fraction * T)` (capped at `T - 1`) the rate climbs
/// linearly to the peak over the first `W` steps and falls linearly to zero
/// at step `T`. With the scheduler disabled the peak is used throughout.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    let total = config.total_steps;
    if step == 0 || step > total {
        return Err(TrainError::Config(format!("step {step} outside 1..={total}")));
    }
    if !config.scheduler {
        return Ok(config.peak_lr);
    }
    let warmup = warmup_steps(config);
    let lr = if step <= warmup {
        config.peak_lr * step as f64 / warmup as f64
    } else {
        config.peak_lr * (total - step) as f64 / (total - warmup) as f64
    };
    Ok(lr)
}

pub fn warmup_steps(config: &TrainConfig) -> usize {
    let w = (config.warmup_fraction * config.total_steps as f64).round() as usize;
    w.min(config.total_steps.saturating_sub(1))
}

/// Moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.values.len()]).collect();
        Self { step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, epsilon: c.epsilon, weight_decay: c.weight_decay }
    }
}

/// One bias-corrected AdamW update of a single tensor at (1-based) step `t`.
///
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·λ·θ`, with `λ = 0` when `decay` is false.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    t: u64,
    lr: f64,
    hp: &AdamW,
    decay: bool,
) {
    let c1 = 1.0 - hp.beta1.powf(t as f64);
    let c2 = 1.0 - hp.beta2.powf(t as f64);
    let wd = if decay { hp.weight_decay } else { 0.0 };
    for i in 0..theta.len() {
        let g = grad[i];
        first[i] = hp.beta1 * first[i] + (1.0 - hp.beta1) * g;
        second[i] = hp.beta2 * second[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + hp.epsilon) + lr * wd * theta[i];
    }
}

/// Applies one AdamW step to every tensor with `trainable[i]` set. Weight
/// decay skips bias tensors. Frozen tensors keep their values and moments.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
    trainable: &[bool],
) -> Result<()> {
    if grads.0.iter().flatten().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite);
    }
    state.step += 1;
    let t = state.step;
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        if !trainable[i] {
            continue;
        }
        let decay = !tensor.is_bias();
        adamw_update(
            &mut tensor.values,
            &grads.0[i],
            &mut state.first[i],
            &mut state.second[i],
            t,
            lr,
            hp,
            decay,
        );
    }
    Ok(())
}
