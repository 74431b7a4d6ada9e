use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::nn::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment optimizer with bias correction.
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable entry of `ps` that received a
    /// gradient. Entries without a gradient are left untouched.
    pub fn step(&mut self, ps: &mut ParamSet<T>, bound: &Bound, grads: &mut Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::from_f64(c.lr / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(c.eps);
        if self.moments.len() < ps.entries().len() {
            self.moments.resize_with(ps.entries().len(), || None);
        }
        let ids: Vec<_> = ps.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.take(bound[id]) else { continue };
            let p = ps.get_mut(id);
            let (m, v) =
                self.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            for (((w, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *w -= step_size * *mv / (vv.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
