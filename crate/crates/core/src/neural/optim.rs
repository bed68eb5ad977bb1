use serde::{Deserialize, Serialize};

use crate::error::{CoherenceError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 0.001,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// One RMSprop update in place:
/// `cache = rho * cache + (1 - rho) * g^2`, `param -= lr * g / (sqrt(cache) + eps)`.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], cache: &mut [f64], cfg: &RmsPropConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != cache.len() {
        return Err(CoherenceError::ShapeMismatch(format!(
            "rmsprop: {} params, {} grads, {} cache entries",
            params.len(),
            grads.len(),
            cache.len()
        )));
    }
    for ((p, &g), c) in params.iter_mut().zip(grads).zip(cache.iter_mut()) {
        *c = cfg.rho * *c + (1.0 - cfg.rho) * g * g;
        *p -= cfg.learning_rate * g / (c.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Squared-gradient accumulators, one per named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: RmsPropConfig,
    pub caches: Vec<(String, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(config: RmsPropConfig) -> Self {
        OptimizerState {
            config,
            caches: Vec::new(),
        }
    }

    /// Applies one step to `name`. Non-finite gradients are rejected before
    /// anything is modified.
    pub fn step(&mut self, name: &str, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(CoherenceError::GradientExplosion(name.to_string()));
        }
        let idx = match self.caches.iter().position(|(n, _)| n == name) {
            Some(i) => i,
            None => {
                self.caches.push((name.to_string(), vec![0.0; params.len()]));
                self.caches.len() - 1
            }
        };
        let config = self.config;
        rmsprop_step(params, grads, &mut self.caches[idx].1, &config)
    }

    pub fn cache(&self, name: &str) -> Option<&[f64]> {
        self.caches.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }
}
