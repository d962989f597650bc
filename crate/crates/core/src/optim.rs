//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::tensor::{Grads, Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Option<Matrix>>,
    pub v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Adam {
            config,
            t: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    /// Updates every trainable tensor that received a gradient. Frozen
    /// tensors are never written.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].get_or_insert_with(|| Matrix::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self.v[id.0].get_or_insert_with(|| Matrix::zeros(g.dim()));
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (self.m[id.0].as_ref().unwrap(), self.v[id.0].as_ref().unwrap());
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + epsilon);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, -2.0]], true);
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let loss = g.sampled_softmax(w, vec![vec![0, 1]], 1.0).unwrap();
            g.backward(loss)
        };
        let mut adam = Adam::new(AdamConfig::default(), store.len());
        adam.step(&mut store, &grads, 0.1);
        // Bias-corrected first step is lr * sign(g) up to epsilon.
        assert!((store.get(id)[[0, 0]] - 1.1).abs() < 1e-6);
        assert!((store.get(id)[[0, 1]] + 2.1).abs() < 1e-6);
    }
}
