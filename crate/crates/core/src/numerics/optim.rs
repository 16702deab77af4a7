use crate::error::{Error, Result};

use super::params::ParameterSet;

/// Adaptive-moment optimizer state for one [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::ParameterMismatch(format!(
                "optimizer tracks {} tensors, set has {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if t.grad().is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
            if t.len() != self.first[i].len() {
                return Err(Error::shape("optimizer_step", t.shape(), &[self.first[i].len()]));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let grad = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, x) in t.values_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                if update != 0.0 {
                    *x -= self.lr * update;
                }
            }
        }
        params.clear_grads();
        Ok(())
    }
}
