//! Adam with decoupled weight decay.

use ndarray::{Array2, Zip};

use crate::config::OptimConfig;
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    /// Weight decay applies to parameters whose name ends in `weight`.
    pub fn new(cfg: &OptimConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, v)| Array2::zeros(v.dim())).collect();
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
            decay: store.iter().map(|(n, _)| n.ends_with("weight")).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `grads[i]` belongs to the `i`-th parameter of `store`
    /// (`None` means zero gradient).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if self.decay[i] && self.weight_decay > 0.0 {
                p.mapv_inplace(|x| x * (1.0 - lr * self.weight_decay));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match &grads[i] {
                Some(g) => {
                    Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| b1 * x);
                    v.mapv_inplace(|x| b2 * x);
                }
            }
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("a.bias", array![[1.0, -2.0, 0.5]]);
        let cfg = OptimConfig::default();
        let mut opt = AdamW::new(&cfg, &store);
        opt.step(&mut store, &[Some(array![[3.0, -0.1, 0.0]])]);
        let p = store.get(store.id("a.bias").unwrap());
        assert!((p[[0, 0]] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((p[[0, 1]] - (-2.0 + 1e-4)).abs() < 1e-9);
        assert_eq!(p[[0, 2]], 0.5);
    }

    #[test]
    fn decoupled_decay_only_on_weights() {
        let mut store = ParamStore::new();
        store.add("x.weight", array![[2.0]]);
        store.add("x.bias", array![[2.0]]);
        let cfg = OptimConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&cfg, &store);
        opt.step(&mut store, &[None, None]);
        assert!((store.get(store.id("x.weight").unwrap())[[0, 0]] - 1.9).abs() < 1e-12);
        assert_eq!(store.get(store.id("x.bias").unwrap())[[0, 0]], 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("q", array![[5.0, -3.0]]);
        let cfg = OptimConfig {
            learning_rate: 0.05,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&cfg, &store);
        for _ in 0..2000 {
            let g = store.get(id).mapv(|x| 2.0 * x);
            opt.step(&mut store, &[Some(g)]);
        }
        assert!(store.get(id).iter().all(|x| x.abs() < 1e-2));
    }
}
