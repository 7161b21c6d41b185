//! Adam with optional decoupled weight decay, and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::params::WeightSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            betas,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: WeightSet,
    pub v: WeightSet,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &WeightSet) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Apply one update; `grads` is aligned with `params` order.
    pub fn step(&mut self, params: &mut WeightSet, grads: &[Matrix]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let AdamConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m.at_mut(i);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.at_mut(i);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (self.m.at(i), self.v.at(i));
            let p = params.at_mut(i);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                if weight_decay > 0.0 {
                    *p -= lr * weight_decay * *p;
                }
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_adam_step_moves_by_lr_in_sign_direction() {
        let mut p = WeightSet::new();
        p.insert("w", array![[1.0, -1.0]]);
        let mut opt = Adam::new(AdamConfig::new(0.1, (0.9, 0.999)), &p);
        opt.step(&mut p, &[array![[3.0, -0.5]]]);
        let w = p.get("w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = WeightSet::new();
        p.insert("w", array![[4.0]]);
        let mut opt = Adam::new(AdamConfig::new(0.05, (0.0, 0.999)), &p);
        for _ in 0..500 {
            let g = p.get("w").unwrap() * 2.0;
            opt.step(&mut p, &[g]);
        }
        assert!(p.get("w").unwrap()[[0, 0]].abs() < 0.05);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![array![[3.0]], array![[4.0]]];
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![array![[0.3]]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.3);
    }
}
