use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.learning_rate * self.weight_decay < 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam moments plus the step counter, one moment pair per parameter in
/// store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Real> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients held in `store`.
    ///
    /// Decay is decoupled: `θ ← θ(1 - lr·wd) - lr·m̂/(√v̂ + ε)`, so with a zero
    /// gradient the trajectory is exactly geometric in `1 - lr·wd`.
    pub fn step(&mut self, store: &mut ParamStore<T>, cfg: &AdamWConfig) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some(p) = store.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let shrink = 1.0 - cfg.learning_rate * cfg.weight_decay;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, theta) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let adaptive = (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                *theta = T::from_f64(theta.as_f64() * shrink - cfg.learning_rate * adaptive);
            }
        }
        Ok(())
    }
}
