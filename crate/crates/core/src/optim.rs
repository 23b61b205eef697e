//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Optimizer state for one [`ParamStore`] layout.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that requires grad and carries a gradient,
    /// then clears all gradients. Frozen parameters are left bit-identical.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        for (i, (_, t)) in store.iter_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t.grad().map(<[f32]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] as f64 / bc1;
                let vh = v[j] as f64 / bc2;
                *w -= c.lr * c.weight_decay * *w;
                *w -= (c.lr as f64 * mh / (vh.sqrt() + c.eps as f64)) as f32;
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new([2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, lr: 0.1, ..Default::default() }, &store);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let s = g.sum(w);
        g.backward(s, &mut store).unwrap();
        opt.step(&mut store);
        let d = store.get(id).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 1.1).abs() < 1e-6);
        assert!(store.get(id).grad().map_or(true, |g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full([3], 0.3)).unwrap();
        let b = store.add("b", Tensor::full([3], 0.7)).unwrap();
        store.freeze_except(|n| n == "a");
        let before = store.get(b).data().to_vec();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        for _ in 0..3 {
            let mut g = Graph::new();
            let (x, y) = (g.param(&store, a), g.param(&store, b));
            let p = g.mul(x, y).unwrap();
            let s = g.sum(p);
            g.backward(s, &mut store).unwrap();
            opt.step(&mut store);
        }
        assert_eq!(store.get(b).data(), before.as_slice());
        assert!(store.get(b).grad().is_none());
        assert_ne!(store.get(a).data(), &[0.3; 3]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new([2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() }, &store);
        for _ in 0..500 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let sq = g.mul(w, w).unwrap();
            let s = g.sum(sq);
            g.backward(s, &mut store).unwrap();
            opt.step(&mut store);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.05));
    }
}
