//! Adam optimizer with bias correction.

use super::model::Model;
use super::{fl, Scalar};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, stored per parameter tensor in the
/// model's canonical visit order.
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &Model<T>, cfg: AdamConfig) -> Self {
        let mut m = Vec::new();
        model.for_each_param(&mut |_, w, _| m.push(vec![T::zero(); w.len()]));
        let v = m.clone();
        Adam {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently stored in the model.
    pub fn step(&mut self, model: &mut Model<T>) {
        self.step += 1;
        let b1: T = fl(self.cfg.beta1);
        let b2: T = fl(self.cfg.beta2);
        let one = T::one();
        let corr1: T = fl(1.0 - self.cfg.beta1.powi(self.step as i32));
        let corr2: T = fl(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr: T = fl(self.cfg.lr);
        let eps: T = fl(self.cfg.eps);

        let mut slot = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.for_each_param_mut(&mut |_, w, g| {
            let m = &mut ms[slot];
            let v = &mut vs[slot];
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            slot += 1;
        });
    }
}
