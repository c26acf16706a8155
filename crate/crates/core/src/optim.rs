//! Adam with global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm above which gradients are rescaled; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || self.clip_norm < 0.0 {
            return Err(Error::Config(
                "eps must be positive and clip_norm nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam<S> {
    config: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    steps: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new<P: ParamSet<S>>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Vec<S>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![S::zero(); t.len()])
            .collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Apply one update from `grads` (same layout as `params`). Returns the
    /// gradient norm before clipping.
    pub fn step<P: ParamSet<S>>(&mut self, params: &mut P, grads: &P) -> Result<f64> {
        let grad_tensors = grads.tensors();
        let sq: f64 = grad_tensors
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|&g| {
                let g = g.to_f64_lossy();
                g * g
            })
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            let name = grad_tensors
                .iter()
                .find(|(_, t)| t.data.iter().any(|v| !v.is_finite()))
                .map_or("?", |(n, _)| n.as_str());
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let c = &self.config;
        let b1 = S::from_f64_lossy(c.beta1);
        let b2 = S::from_f64_lossy(c.beta2);
        let one = S::one();
        let lr_t = S::from_f64_lossy(
            c.learning_rate * (1.0 - c.beta2.powi(self.steps)).sqrt()
                / (1.0 - c.beta1.powi(self.steps)),
        );
        let eps_hat = S::from_f64_lossy(c.eps * (1.0 - c.beta2.powi(self.steps)).sqrt());
        let clip = S::from_f64_lossy(clip);
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad_tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gr), mi), vi) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gr = gr * clip;
                *mi = b1 * *mi + (one - b1) * gr;
                *vi = b2 * *vi + (one - b2) * gr * gr;
                *w -= lr_t * *mi / (vi.sqrt() + eps_hat);
            }
        }
        Ok(norm)
    }
}
