use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if self.kind == OptimizerKind::Adam
            && !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0)
        {
            return Err(Error::InvalidConfig("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Optimizer {
    cfg: OptimizerConfig,
    first: Params,
    second: Params,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, shape: &Params) -> Self {
        let zeros: Params = shape.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            cfg,
            first: zeros.clone(),
            second: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, gi) in p.iter_mut().zip(g) {
                        *w -= self.cfg.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let OptimizerConfig { lr, beta1, beta2, eps, .. } = self.cfg;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (l, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first[l];
                    let v = &mut self.second[l];
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }

    /// Clears the moment estimates of one parameter.
    pub fn reset(&mut self, layer: usize, index: usize) {
        self.first[layer][index] = 0.0;
        self.second[layer][index] = 0.0;
    }
}
