//! Adadelta.
//!
//! ```text
//! acc_g  = rho * acc_g  + (1 - rho) * g^2
//! delta  = -sqrt(acc_dx + eps) / sqrt(acc_g + eps) * g
//! acc_dx = rho * acc_dx + (1 - rho) * delta^2
//! x     += lr * delta
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    /// Multiplier on the update; 1.0 is the original learning-rate-free rule.
    pub lr: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adadelta {
    cfg: AdadeltaConfig,
    acc_grad: Vec<Vec<f64>>,
    acc_delta: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(cfg: AdadeltaConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.rho) || !(cfg.eps > 0.0) || !(cfg.lr > 0.0) {
            return Err(Error::Config(format!(
                "adadelta needs rho in [0,1), eps > 0 and lr > 0, got {cfg:?}"
            )));
        }
        Ok(Self {
            cfg,
            acc_grad: Vec::new(),
            acc_delta: Vec::new(),
        })
    }

    pub fn config(&self) -> AdadeltaConfig {
        self.cfg
    }

    pub fn accumulators(&self, index: usize) -> Option<(&[f64], &[f64])> {
        Some((self.acc_grad.get(index)?, self.acc_delta.get(index)?))
    }

    /// Applies one update to every parameter in `store`. Gradients are left
    /// in place; the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.acc_grad.len() != store.len() {
            self.acc_grad = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.acc_delta = self.acc_grad.clone();
        }
        let AdadeltaConfig { rho, eps, lr } = self.cfg;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.param_mut(id);
            let grad = p.grad.as_ref().ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            let (ag, ad) = (&mut self.acc_grad[id.index()], &mut self.acc_delta[id.index()]);
            if ag.len() != grad.len() {
                return Err(Error::Config(format!("`{}` changed size", p.name)));
            }
            let value = p.value.data_mut();
            for k in 0..value.len() {
                let g = grad.data()[k];
                ag[k] = rho * ag[k] + (1.0 - rho) * g * g;
                let delta = -((ad[k] + eps).sqrt() / (ag[k] + eps).sqrt()) * g;
                ad[k] = rho * ad[k] + (1.0 - rho) * delta * delta;
                value[k] += lr * delta;
            }
        }
        Ok(())
    }
}
