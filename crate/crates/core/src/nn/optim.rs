use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.0025, momentum: 0.9, epochs: 12, batch_size: 2, seed: 0 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::InvalidArgument(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum SGD: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update using the gradients stored on `params` (scaled by
    /// `grad_scale`). Nothing is written when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], config: &SgdConfig, grad_scale: f64) -> Result<(), NnError> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} blocks, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (block, (p, v)) in params.iter().zip(&self.velocity).enumerate() {
            if p.len() != v.len() {
                return Err(NnError::Shape(format!("block {block}: {} params vs {} velocity", p.len(), v.len())));
            }
            if let Some(g) = p.grad() {
                if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                    let max_abs = g.iter().filter(|x| x.is_finite()).fold(0.0f64, |m, x| m.max(x.abs()));
                    return Err(NnError::NonFiniteGradient { block, value: *bad, max_abs });
                }
            }
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = p.grad().map(|g| g.to_vec());
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i] * grad_scale);
                v[i] = config.momentum * v[i] + g;
                data[i] -= config.learning_rate * v[i];
            }
        }
        Ok(())
    }
}
