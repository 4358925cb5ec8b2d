//! Adam with L2 weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::nn::Parameters;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// The learning rate is divided by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            epochs: 20,
            decay_every: 10,
            decay_factor: 10.0,
            batch_size: 16,
        }
    }
}

impl OptimizerConfig {
    pub fn desk() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            epochs: 30,
            decay_every: 20,
            batch_size: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optim.{m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2 must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return bad("batch_size and decay_every must be positive");
        }
        if self.decay_factor.is_nan() || self.decay_factor < 1.0 {
            return bad("decay_factor must be at least 1");
        }
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for _ in 0..epoch / self.decay_every {
            lr /= self.decay_factor;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(config: OptimizerConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        Adam {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let cfg = self.config;
        let bias1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bias2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let grads = grads.tensors();
        for (i, ((_, theta), (_, grad))) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..theta.len() {
                let g = grad[j] + cfg.weight_decay * theta[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}
