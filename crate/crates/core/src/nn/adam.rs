use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{Gradients, Model};
use crate::nn::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &Model<T>, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !(config.eps > 0.0) {
            return Err(Error::invalid(format!("bad Adam config {config:?}")));
        }
        let zeros: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    fn check(&self, model: &Model<T>, grads: &Gradients<T>) -> Result<()> {
        let params = model.params();
        if self.m.len() != params.len() || self.v.len() != params.len() || grads.params.len() != params.len() {
            return Err(Error::dims(
                format!("{} parameter tensors", params.len()),
                format!("{} moments, {} gradients", self.m.len(), grads.params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            let n = p.data.len();
            if self.m[i].len() != n || self.v[i].len() != n || grads.params[i].len() != n {
                return Err(Error::dims(format!("{n} values for {}", p.name), "mismatched moment or gradient"));
            }
        }
        Ok(())
    }

    /// Applies one update to every trainable parameter. Frozen parameters and
    /// their moments are left untouched.
    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>) -> Result<()> {
        self.check(model, grads)?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let trainable = model.trainable().to_vec();
        for (idx, p) in model.params_mut().iter_mut().enumerate() {
            if !trainable[idx] {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (k, (w, &g)) in p.data.iter_mut().zip(&grads.params[idx]).enumerate() {
                let g = g.as_f64();
                let mk = beta1 * m[k].as_f64() + (1.0 - beta1) * g;
                let vk = beta2 * v[k].as_f64() + (1.0 - beta2) * g * g;
                m[k] = T::from_f64_lossy(mk);
                v[k] = T::from_f64_lossy(vk);
                *w = T::from_f64_lossy(w.as_f64() - lr * (mk / c1) / ((vk / c2).sqrt() + eps));
            }
        }
        Ok(())
    }
}
