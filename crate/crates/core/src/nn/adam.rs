use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{Gradients, PredictorParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers over the flat parameter index.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &PredictorParams) -> Self {
        Self {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn step(
        &mut self,
        params: &mut PredictorParams,
        grads: &Gradients,
        cfg: &AdamConfig,
    ) -> Result<()> {
        let g = grads.to_flat();
        if g.len() != self.m.len() || g.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam state of {} for {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                g.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        params.for_each_flat_mut(|i, p| {
            let gi = g[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        });
        Ok(())
    }
}
