//! Trainable parameters and the Adam update rule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// A trainable tensor together with its gradient and Adam moment estimates.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Adam hyperparameters. Only the learning rate is usually changed; the
/// moment decays and epsilon follow the standard defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// One Adam update with bias correction over a set of parameters.
///
/// Gradients are zeroed after the step. With `round_storage_to_f32` set,
/// the updated value and both moments are rounded to the nearest
/// f32-representable number, which makes 32-bit checkpoints lossless.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    hp: &AdamParams,
    round_storage_to_f32: bool,
) -> Result<()> {
    for p in params {
        if p.value.shape() != p.grad.shape() {
            return Err(Error::Shape(format!(
                "adam_step: value {:?} vs grad {:?}",
                p.value.shape(),
                p.grad.shape()
            )));
        }
        p.step_count += 1;
        let t = p.step_count as i32;
        let bias1 = 1.0 - hp.beta1.powi(t);
        let bias2 = 1.0 - hp.beta2.powi(t);
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            value[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.epsilon);
            if round_storage_to_f32 {
                value[i] = value[i] as f32 as f64;
                m[i] = m[i] as f32 as f64;
                v[i] = v[i] as f32 as f64;
            }
            grad[i] = 0.0;
        }
    }
    Ok(())
}
