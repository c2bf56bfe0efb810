//! Adam with bias correction and decoupled weight decay.

use std::collections::{HashMap, HashSet};

use crate::models::OptimizerSnapshot;
use crate::tensor::{Scalar, Tensor};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct Adam<F: Scalar> {
    pub config: AdamConfig,
    step_count: u64,
    // Parameter tensor id -> (first moment, second moment).
    slots: HashMap<usize, (Vec<F>, Vec<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Result<Self, TrainError> {
        for (name, b) in [("beta1", config.beta1), ("beta2", config.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::InvalidSettings(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(Self {
            config,
            step_count: 0,
            slots: HashMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One optimizer step over `params` at learning rate `lr`. Parameters
    /// outside `trainable` (when given) are frozen: no update, no moment
    /// accumulation. Parameters without gradients are skipped. A NaN
    /// gradient aborts with the offending parameter named.
    pub fn step(
        &mut self,
        params: &[(String, Tensor<F>)],
        trainable: Option<&HashSet<usize>>,
        lr: f64,
    ) -> Result<(), TrainError> {
        self.step_count += 1;
        let t = self.step_count;
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let eps = F::from_f64(self.config.epsilon);
        let corr1 = F::from_f64(1.0 - self.config.beta1.powi(t as i32));
        let corr2 = F::from_f64(1.0 - self.config.beta2.powi(t as i32));
        let lr_f = F::from_f64(lr);
        let decay = F::from_f64(lr * self.config.weight_decay);

        for (name, p) in params {
            if let Some(active) = trainable {
                if !active.contains(&p.id()) {
                    continue;
                }
            }
            let Some(grad) = p.grad() else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NanGradient(name.clone()));
            }
            let (m, v) = self
                .slots
                .entry(p.id())
                .or_insert_with(|| (vec![F::zero(); grad.len()], vec![F::zero(); grad.len()]));
            let mut values = p.values_mut();
            if values.len() != grad.len() {
                return Err(TrainError::InvalidSettings(format!(
                    "gradient length {} does not match parameter '{name}' ({})",
                    grad.len(),
                    values.len()
                )));
            }
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                let mut update = lr_f * m_hat / (v_hat.sqrt() + eps);
                if self.config.weight_decay > 0.0 {
                    update += decay * values[i];
                }
                values[i] -= update;
            }
        }
        Ok(())
    }

    /// Moments as plain f64 arrays for checkpointing, in parameter order.
    pub fn snapshot(&self, params: &[(String, Tensor<F>)]) -> OptimizerSnapshot {
        let mut moments = Vec::new();
        for (name, p) in params {
            if let Some((m, v)) = self.slots.get(&p.id()) {
                moments.push((
                    name.clone(),
                    m.iter().map(|&x| x.to_f64()).collect(),
                    v.iter().map(|&x| x.to_f64()).collect(),
                ));
            }
        }
        OptimizerSnapshot {
            step: self.step_count,
            moments,
        }
    }
}

/// Clear gradients on every parameter.
pub fn zero_grads<F: Scalar>(params: &[(String, Tensor<F>)]) {
    for (_, p) in params {
        p.zero_grad();
    }
}
