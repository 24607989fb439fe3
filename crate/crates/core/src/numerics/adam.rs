use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(DEFAULT_LR)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter using its accumulated gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(id) = params.ids().find(|&id| params.grad(id).is_none()) {
            return Err(Error::MissingGrad(params.name(id).to_string()));
        }
        if self.m.is_empty() {
            self.m = params.ids().map(|id| vec![0.0; params.value(id).numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (value, grad) = params.value_and_grad_mut(id);
            let grad = grad.expect("checked above");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            if m.len() != grad.len() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: vec![m.len()],
                    rhs: vec![grad.len()],
                });
            }
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
