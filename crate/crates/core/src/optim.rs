//! Bias-corrected Adam over named parameter sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradSet, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    names: Vec<String>,
}

impl AdamState {
    pub fn new<P: Parameterized>(model: &P, config: AdamConfig) -> Self {
        let params = model.params();
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            names: params.into_iter().map(|(n, _)| n).collect(),
        }
    }

    /// Applies one update. A non-finite gradient leaves parameters and state
    /// untouched and returns an error. Parameters are rounded to the `f32`
    /// grid afterwards so checkpoints reproduce them exactly.
    pub fn step<P: Parameterized>(&mut self, model: &mut P, grads: &GradSet) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Divergence { step: self.step as usize, detail: "non-finite gradient".into() });
        }
        if grads.entries.len() != self.names.len()
            || grads.entries.iter().zip(&self.names).any(|((n, _), m)| n != m)
        {
            return Err(Error::Shape("gradient names do not match optimizer state".into()));
        }
        for (((_, g), m), name) in grads.entries.iter().zip(&self.m).zip(&self.names) {
            if g.len() != m.len() {
                return Err(Error::Shape(format!("gradient {name} has {} values, expected {}", g.len(), m.len())));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, p)) in model.params_mut().into_iter().enumerate() {
            let g = &grads.entries[i].1.data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] = ((p.data[j] - lr * mh / (vh.sqrt() + eps)) as f32) as f64;
            }
        }
        Ok(())
    }
}
