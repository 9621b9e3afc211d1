use serde::{Deserialize, Serialize};

use super::NnError;

/// Adaptive-moment gradient descent (minimizes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite("gradient".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Slowly tracking shadow parameters, `target <- (1 - tau) target + tau live`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCopy {
    pub params: Vec<f64>,
}

impl TargetCopy {
    pub fn new(live: &[f64]) -> Self {
        Self {
            params: live.to_vec(),
        }
    }

    pub fn update(&mut self, live: &[f64], tau: f64) -> Result<(), NnError> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(NnError::BadSpec(format!("tau {tau} outside (0, 1]")));
        }
        if live.len() != self.params.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.params.len(),
                got: live.len(),
            });
        }
        for (t, &x) in self.params.iter_mut().zip(live) {
            // Written as a step towards `live` so equal entries stay bit-identical.
            *t = if tau == 1.0 { x } else { *t + tau * (x - *t) };
        }
        Ok(())
    }
}
