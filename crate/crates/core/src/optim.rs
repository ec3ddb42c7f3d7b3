//! AdamW optimizer and gradient accumulation for micro-batched training.

use crate::error::{Error, Result};

/// AdamW: Adam moment updates with bias correction, plus weight decay
/// applied directly to the parameters (decoupled from the gradient).
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    /// Standard betas (0.9, 0.999) and eps 1e-8.
    pub fn new(lr: f64, weight_decay: f64, param_count: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. `params` and `grads` must both match
    /// the optimizer's parameter count.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Training(format!(
                "optimizer state for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }
}

/// Sums per-example gradients so that `mean()` equals the gradient of the
/// mean loss over the accumulated micro-batches.
pub struct GradAccumulator {
    sum: Vec<f64>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(param_count: usize) -> Self {
        Self {
            sum: vec![0.0; param_count],
            count: 0,
        }
    }

    /// Buffer sized for one micro-batch gradient; zeroed.
    pub fn scratch(&self) -> Vec<f64> {
        vec![0.0; self.sum.len()]
    }

    /// Add one micro-batch gradient.
    pub fn add(&mut self, grads: &[f64]) {
        assert_eq!(grads.len(), self.sum.len(), "gradient size mismatch");
        for (s, &g) in self.sum.iter_mut().zip(grads) {
            *s += g;
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Mean gradient across everything added since the last reset.
    pub fn mean(&self) -> Vec<f64> {
        assert!(self.count > 0, "mean of empty accumulator");
        let inv = 1.0 / self.count as f64;
        self.sum.iter().map(|&s| s * inv).collect()
    }

    /// Clear for the next accumulation window.
    pub fn reset(&mut self) {
        self.sum.fill(0.0);
        self.count = 0;
    }
}
