use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub cosine_decay: bool,
    /// Horizon of the cosine schedule; ignored without decay.
    #[serde(default)]
    pub total_steps: u64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: default_eps(),
            cosine_decay: false,
            total_steps: 0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        if self.cosine_decay && self.total_steps == 0 {
            return Err(Error::invalid("cosine decay needs total_steps > 0"));
        }
        Ok(())
    }
}

/// Optimizer state: bias-corrected Adam with optional cosine decay of the
/// learning rate, `lr · ½(1 + cos(π·step/total_steps))`.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate applied at (1-based) update number `step`.
    pub fn effective_lr(&self, step: u64) -> f64 {
        let c = &self.config;
        if !c.cosine_decay {
            return c.lr;
        }
        let frac = step.min(c.total_steps) as f64 / c.total_steps as f64;
        c.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; parameters
    /// without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != params.get(id).numel() {
                    return Err(Error::shape(
                        "adam",
                        format!("gradient of {} has {} values, expected {}", params.name(id), g.len(), params.get(id).numel()),
                    ));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let lr = self.effective_lr(self.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        for (id, g) in params.ids().zip(grads) {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                p[i] -= (lr * mh / (vh.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }

    /// Convenience wrapper taking gradients straight from a backward pass.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let dense = collect_param_grads(params.len(), grads);
        self.update(params, &dense)
    }
}

/// Dense per-parameter gradient list from a backward pass.
pub fn collect_param_grads(n_params: usize, grads: &Gradients) -> Vec<Option<Vec<f32>>> {
    collect_scope_grads(n_params, grads, 0)
}

/// As [`collect_param_grads`] for the parameters of one graph scope.
pub fn collect_scope_grads(n_params: usize, grads: &Gradients, scope: u32) -> Vec<Option<Vec<f32>>> {
    let mut out = vec![None; n_params];
    for (id, g) in grads.params_in(scope) {
        if id.0 < n_params {
            out[id.0] = Some(g.to_vec());
        }
    }
    out
}
