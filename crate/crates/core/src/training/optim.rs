use super::stats::sum_sq;
use crate::error::{contract_err, Result};
use crate::model::TrunkParameters;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only; biases and norm gains are not decayed.
    pub weight_decay: f64,
    /// Global gradient-norm clip threshold.
    pub clip: Option<f64>,
    /// Linear learning-rate warmup length in steps.
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01, clip: Some(1.0), warmup_steps: 100 }
    }
}

/// Moment buffers and step counter. `step` counts applied updates.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl OptimState {
    pub fn new(params: &TrunkParameters, config: AdamWConfig) -> Self {
        Self::resume(params, config, 0)
    }

    /// Fresh moments with the step counter (and so the warmup position)
    /// set to `step`.
    pub fn resume(params: &TrunkParameters, config: AdamWConfig, step: usize) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self { config, m: zeros(), v: zeros(), step }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Learning rate for the next update.
    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            self.config.lr
        } else {
            self.config.lr * ((self.step + 1) as f64 / w as f64).min(1.0)
        }
    }

    /// Applies one update from the gradients stored on `params`, clipping
    /// them first if configured. Returns the pre-clip global norm.
    pub fn apply(&mut self, params: &mut TrunkParameters) -> Result<f64> {
        if params.len() != self.m.len() {
            return contract_err(format!("{} parameters for an optimizer over {}", params.len(), self.m.len()));
        }
        let mut sq = 0.0;
        for (i, p) in params.iter().enumerate() {
            let Some(g) = p.tensor.grad() else {
                return contract_err(format!("parameter {} has no gradient", p.name));
            };
            if g.len() != self.m[i].len() {
                return contract_err(format!("gradient of {} has the wrong length", p.name));
            }
            sq += sum_sq(g);
        }
        let norm = sq.sqrt();
        let factor = match self.config.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.tensor.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let (data, g) = p.tensor.data_and_grad_mut();
            let g = g.expect("checked above");
            for (((x, g), m), v) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * factor;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *x -= lr * (update + decay * *x);
            }
        }
        Ok(norm)
    }
}

