use serde::{Deserialize, Serialize};

use super::params::{ModelParams, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_global: f64,
    pub lr_local: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_global: 1e-4,
            lr_local: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |lr: f64| lr.is_finite() && lr >= 0.0;
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !rate_ok(self.lr_global) || !rate_ok(self.lr_local) {
            return Err(Error::Config(format!(
                "learning rates must be finite and ≥ 0, got {} / {}",
                self.lr_global, self.lr_local
            )));
        }
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got {} / {}",
                self.beta1, self.beta2
            )));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Local => self.lr_local,
            ParamGroup::Global | ParamGroup::Fusion => self.lr_global,
        }
    }
}

/// First and second moments per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| Moments {
                name: name.to_string(),
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            })
            .collect();
        OptimizerState {
            config,
            step: 0,
            moments,
        }
    }

    /// Moments must line up with `params` by name and size.
    pub fn check(&self, params: &ModelParams) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} moment pairs for {} parameters",
                self.moments.len(),
                params.len()
            )));
        }
        for (mo, (name, t)) in self.moments.iter().zip(params.iter()) {
            if mo.name != name || mo.m.len() != t.numel() || mo.v.len() != t.numel() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments for {} do not match parameter {name} {:?}",
                    mo.name,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. `grads` must be in parameter order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[(String, Tensor)],
    state: &mut OptimizerState,
) -> Result<()> {
    state.check(params)?;
    if grads.len() != params.len() {
        return Err(Error::dim(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let cfg = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((name, g), mo) in grads.iter().zip(state.moments.iter_mut()) {
        let p = params
            .get(name)
            .filter(|_| *name == mo.name)
            .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "gradient {:?} for parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let lr = cfg.rate(ModelParams::group(name));
        let mut data = p.to_vec();
        for (((x, &gi), m), v) in data.iter_mut().zip(g.data()).zip(&mut mo.m).zip(&mut mo.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        let shape = p.shape().to_vec();
        params.set(name, Tensor::new(&shape, data)?)?;
    }
    Ok(())
}
