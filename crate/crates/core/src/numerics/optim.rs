//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::error::NumericsError;
use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 100.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| -> Vec<Tensor> {
            p.iter()
                .map(|t| Tensor::zeros(t.value.rows, t.value.cols))
                .collect()
        };
        Self {
            config,
            first: zeros(params),
            second: zeros(params),
            steps: 0,
        }
    }

    /// Clip, update moments, apply, and zero the gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<StepStats, NumericsError> {
        if let Some(bad) = params.iter().find(|t| !t.grad.all_finite()) {
            return Err(NumericsError::NonFiniteGradient {
                tensor: bad.name.clone(),
            });
        }
        let grad_norm = params.grad_norm();
        let clip_scale = if grad_norm > self.config.grad_clip {
            self.config.grad_clip / grad_norm
        } else {
            1.0
        };
        self.steps += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for ((tensor, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for (((p, g), mi), vi) in tensor
                .value
                .data
                .iter_mut()
                .zip(tensor.grad.data.iter_mut())
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                let g_eff = *g * clip_scale;
                *mi = beta1 * *mi + (1.0 - beta1) * g_eff;
                *vi = beta2 * *vi + (1.0 - beta2) * g_eff * g_eff;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
                *g = 0.0;
            }
            if !tensor.value.all_finite() {
                return Err(NumericsError::NonFiniteGradient {
                    tensor: tensor.name.clone(),
                });
            }
        }
        Ok(StepStats {
            grad_norm,
            clip_scale,
        })
    }
}
