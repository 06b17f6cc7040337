use std::collections::BTreeMap;

use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name, so one
/// optimizer can own an arbitrary subset of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment tensors as a flat named list (`m/<name>`, `v/<name>`).
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.first {
            out.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v/{k}"), t.clone());
        }
        out
    }

    /// Inverse of [`Adam::state_tensors`].
    pub fn from_state(config: AdamConfig, steps: u64, tensors: BTreeMap<String, Tensor>) -> Self {
        let mut opt = Self::new(config);
        opt.steps = steps;
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("m/") {
                opt.first.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v/") {
                opt.second.insert(name.to_string(), t);
            }
        }
        opt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::from_vec(&[2], vec![0.3, -2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        adam.step(&mut store, &grads);
        let p = store.get("p").unwrap().data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(5.0));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let x = store.get("x").unwrap().item();
            let mut grads = Gradients::new();
            grads.insert("x".into(), Tensor::scalar(2.0 * (x - 2.0)));
            adam.step(&mut store, &grads);
        }
        assert!((store.get("x").unwrap().item() - 2.0).abs() < 1e-2);
    }

    #[test]
    fn state_round_trip() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        let mut grads = Gradients::new();
        grads.insert("a".into(), Tensor::scalar(0.5));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &grads);
        let back = Adam::from_state(adam.config, adam.steps, adam.state_tensors());
        assert_eq!(back, adam);
    }
}
