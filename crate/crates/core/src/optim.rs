//! Adam with per-parameter first and second moments.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Param};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Param]) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.value.dim())).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &[Mat]) {
        assert_eq!(params.len(), self.m.len(), "Adam: parameter count changed");
        assert_eq!(params.len(), grads.len(), "Adam: one gradient per parameter");
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new("p", ndarray::array![[1.0, -2.0]]);
        let mut opt = Adam::new(cfg(0.1), &[&p]);
        opt.step(vec![&mut p], &[ndarray::array![[3.0, -0.5]]]);
        assert!((p.value[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.value[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_rate_leaves_params() {
        let mut p = Param::new("p", ndarray::array![[1.0, -2.0]]);
        let before = p.value.clone();
        let mut opt = Adam::new(cfg(0.0), &[&p]);
        opt.step(vec![&mut p], &[ndarray::array![[3.0, -0.5]]]);
        assert_eq!(p.value, before);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Param::new("p", ndarray::array![[4.0]]);
        let mut opt = Adam::new(cfg(0.05), &[&p]);
        for _ in 0..2000 {
            let g = p.value.mapv(|w| 2.0 * (w - 1.0));
            opt.step(vec![&mut p], &[g]);
        }
        assert!((p.value[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
