use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.dims())).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// One update; `grads[i]` of `None` means no gradient reached parameter `i`.
    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            p.expect_same_dims(g, "gradient")?;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let decayed = *w as f64 * (1.0 - c.lr * c.weight_decay);
                *w = (decayed - c.lr * mhat / (vhat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}
