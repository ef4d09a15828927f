//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::delta_model::DeltaModel;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment buffers, one flat vector per tensor in visit order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, model: &DeltaModel<T>) -> Self {
        let mut m = Vec::new();
        model.visit(|_, t| m.push(vec![0.0; t.len()]));
        let v = m.clone();
        Self {
            config,
            m,
            v,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `model` along `grads` (same layout as `model`).
    pub fn step<T: Scalar>(&mut self, model: &mut DeltaModel<T>, grads: &DeltaModel<T>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut flat_grads = Vec::with_capacity(self.m.len());
        grads.visit(|_, t| flat_grads.push(t.data.iter().map(|g| g.as_f64()).collect::<Vec<_>>()));
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(|_, t| {
            let g = &flat_grads[idx];
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for (j, p) in t.data.iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut x = p.as_f64();
                x -= c.lr * c.weight_decay * x;
                x -= c.lr * mhat / (vhat.sqrt() + c.eps);
                *p = T::of(x);
            }
            idx += 1;
        });
    }
}
