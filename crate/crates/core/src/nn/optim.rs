//! Adam with optional global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::layers::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descend along the accumulated gradients. Gradients are rescaled so
    /// their global norm is at most `max_grad_norm` when given. Returns the
    /// pre-clipping norm.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, max_grad_norm: Option<f64>) -> f64 {
        let norm = store.grad_norm();
        let clip = match max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i] * clip;
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                *x -= lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + epsilon);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_rows(&[[1.0, -1.0, 0.0]]));
        store.params_mut()[0].grad = Tensor::from_rows(&[[2.0, -0.5, 0.0]]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, 0.1, None);
        let w = store.get(0).value.data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_rows(&[[1.0, 2.0]]));
        store.params_mut()[0].grad = Tensor::from_rows(&[[3.0, 4.0]]);
        let before = store.clone();
        let mut adam = Adam::new(&store, AdamConfig::default());
        assert_eq!(adam.step(&mut store, 0.0, Some(1.0)), 5.0);
        assert_eq!(store.get(0).value, before.get(0).value);
    }
}
