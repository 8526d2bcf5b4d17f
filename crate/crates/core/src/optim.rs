//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8) or SGD with 0.9 momentum.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    first: ParamSet<T>,
    second: ParamSet<T>,
    t: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &ParamSet<T>) -> Self {
        Self { kind, first: params.zeros_like(), second: params.zeros_like(), t: 0 }
    }

    pub fn adam(params: &ParamSet<T>) -> Self {
        Self::new(OptimizerKind::Adam, params)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Parameters present in `params` but missing from `grads` are left alone.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) {
        self.t += 1;
        let lr_t = c::<T>(lr);
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
                let bc1 = c::<T>(1.0 - b1.powi(self.t as i32));
                let bc2 = c::<T>(1.0 - b2.powi(self.t as i32));
                let (b1, b2, eps) = (c::<T>(b1), c::<T>(b2), c::<T>(eps));
                let one = T::one();
                let iter = params.iter_mut().zip(self.first.iter_mut()).zip(self.second.iter_mut());
                for (((name, p), (_, m)), (_, v)) in iter {
                    let Some(g) = grads.get(name) else { continue };
                    let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        m[i] = b1 * m[i] + (one - b1) * gi;
                        v[i] = b2 * v[i] + (one - b2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p[i] -= lr_t * mh / (vh.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = c::<T>(0.9);
                for ((name, p), (_, m)) in params.iter_mut().zip(self.first.iter_mut()) {
                    let Some(g) = grads.get(name) else { continue };
                    let (p, m) = (p.data_mut(), m.data_mut());
                    for i in 0..p.len() {
                        m[i] = mu * m[i] + g.data()[i];
                        p[i] -= lr_t * m[i];
                    }
                }
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay reaching
/// zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total {
            return 0.0;
        }
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let progress = (step - self.warmup) as f64 / span;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_shape() {
        let s = WarmupCosine { peak: 0.1, warmup: 10, total: 100 };
        let trace: Vec<f64> = (0..=100).map(|i| s.lr(i)).collect();
        assert!(trace[..10].windows(2).all(|w| w[1] > w[0]));
        assert!((trace[9] - 0.1).abs() < 1e-12);
        assert!((trace[10] - 0.1).abs() < 1e-12);
        assert!(trace[10..].windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(trace[100], 0.0);
        assert!(trace[99] < 1e-3);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = ParamSet::<f64>::new();
        p.insert("x", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut g = ParamSet::new();
        g.insert("x", Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
        let mut opt = Optimizer::adam(&p);
        opt.step(&mut p, &g, 0.1);
        // First Adam step is lr * sign(g) after bias correction.
        assert!((p.get("x").unwrap().data()[0] - 0.9).abs() < 1e-6);
        assert!((p.get("x").unwrap().data()[1] + 0.9).abs() < 1e-6);
    }
}
