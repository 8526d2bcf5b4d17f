//! Linear and shallow probes on fixed features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::{init_linear, linear, ParamSet};
use crate::scalar::{c, Scalar};
use crate::seed;
use crate::tensor::{argmax, Tensor};

/// Per-column standardisation fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<T: Scalar>(x: &Tensor<T>) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                mean[j] += v.as_f64() / n as f64;
            }
        }
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v.as_f64() - mean[j]).powi(2) / n as f64;
            }
        }
        Self { mean, std: var.into_iter().map(|v| v.sqrt().max(1e-6)).collect() }
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let d = self.mean.len();
        let data = x.data().iter().enumerate().map(|(i, &v)| c::<T>((v.as_f64() - self.mean[i % d]) / self.std[i % d])).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// 0 for a linear probe.
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 0, steps: 1500, batch: 64, lr: 1e-2, seed: 0 }
    }
}

fn rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let d = x.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![idx.len(), d], out).expect("row gather")
}

/// Softmax classifier on standardised features.
#[derive(Debug, Clone)]
pub struct Probe<T> {
    params: ParamSet<T>,
    norm: Standardizer,
    hidden: usize,
}

impl<T: Scalar> Probe<T> {
    pub fn fit(x: &Tensor<T>, labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::shape(format!("{} labelled rows", x.rows()), labels.len()));
        }
        let norm = Standardizer::fit(x);
        let xs = norm.apply(x);
        let mut rng = seed::rng(cfg.seed, "probe");
        let mut params = ParamSet::new();
        if cfg.hidden == 0 {
            init_linear(&mut params, &mut rng, "out", x.cols(), n_classes, 1.0);
        } else {
            init_linear(&mut params, &mut rng, "hid", x.cols(), cfg.hidden, 1.0);
            init_linear(&mut params, &mut rng, "out", cfg.hidden, n_classes, 1.0);
        }
        let mut opt = Optimizer::adam(&params);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        let mut cursor = order.len();
        for _ in 0..cfg.steps {
            let mut idx = Vec::with_capacity(cfg.batch);
            while idx.len() < cfg.batch.min(labels.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let mut g = Graph::new();
            let b = params.bind(&mut g, true);
            let xb = g.input(rows(&xs, &idx));
            let logits = Self::forward_graph(&mut g, &b, cfg.hidden, xb)?;
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = g.cross_entropy(logits, &yb)?;
            let mut grads = g.backward(loss)?;
            let grads = params.collect_grads(&b, &mut grads);
            opt.step(&mut params, &grads, cfg.lr);
        }
        Ok(Self { params, norm, hidden: cfg.hidden })
    }

    fn forward_graph(g: &mut Graph<T>, b: &crate::params::Bound, hidden: usize, x: crate::autograd::Var) -> Result<crate::autograd::Var> {
        if hidden == 0 {
            linear(g, b, "out", x)
        } else {
            let h = linear(g, b, "hid", x)?;
            let h = g.silu(h);
            linear(g, b, "out", h)
        }
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let xv = g.input(self.norm.apply(x));
        let logits = Self::forward_graph(&mut g, &b, self.hidden, xv)?;
        let lv = g.value(logits);
        Ok((0..lv.rows()).map(|i| argmax(lv.row(i))).collect())
    }

    pub fn accuracy(&self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
    }
}

/// Least-squares linear regression (ridge `1e-3`) on standardised features;
/// returns a predictor closure over new rows.
pub fn fit_ridge<T: Scalar>(x: &Tensor<T>, y: &[Vec<f64>]) -> Result<impl Fn(&Tensor<T>) -> Vec<Vec<f64>>> {
    let n = x.rows();
    if n != y.len() || n == 0 {
        return Err(Error::shape(format!("{n} targets"), y.len()));
    }
    let norm = Standardizer::fit(x);
    let xs = norm.apply(x);
    let d = x.cols() + 1;
    let k = y[0].len();
    // Normal equations with a bias column.
    let mut a = vec![0.0; d * d];
    let mut rhs = vec![0.0; d * k];
    for i in 0..n {
        let mut row: Vec<f64> = xs.row(i).iter().map(|v| v.as_f64()).collect();
        row.push(1.0);
        for p in 0..d {
            for q in 0..d {
                a[p * d + q] += row[p] * row[q];
            }
            for t in 0..k {
                rhs[p * k + t] += row[p] * y[i][t];
            }
        }
    }
    for p in 0..d {
        a[p * d + p] += 1e-3;
    }
    let w = solve_spd(&mut a, &mut rhs, d, k)?;
    Ok(move |x: &Tensor<T>| {
        let xs = norm.apply(x);
        (0..xs.rows())
            .map(|i| {
                let mut row: Vec<f64> = xs.row(i).iter().map(|v| v.as_f64()).collect();
                row.push(1.0);
                (0..k).map(|t| (0..d).map(|p| row[p] * w[p * k + t]).sum()).collect()
            })
            .collect()
    })
}

/// Gaussian elimination with partial pivoting on `a · w = rhs`.
fn solve_spd(a: &mut [f64], rhs: &mut [f64], d: usize, k: usize) -> Result<Vec<f64>> {
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs())).unwrap();
        if a[piv * d + col].abs() < 1e-12 {
            return Err(Error::invalid("singular normal equations"));
        }
        if piv != col {
            for q in 0..d {
                a.swap(piv * d + q, col * d + q);
            }
            for t in 0..k {
                rhs.swap(piv * k + t, col * k + t);
            }
        }
        for r in col + 1..d {
            let f = a[r * d + col] / a[col * d + col];
            for q in col..d {
                a[r * d + q] -= f * a[col * d + q];
            }
            for t in 0..k {
                rhs[r * k + t] -= f * rhs[col * k + t];
            }
        }
    }
    let mut w = vec![0.0; d * k];
    for r in (0..d).rev() {
        for t in 0..k {
            let s: f64 = (r + 1..d).map(|q| a[r * d + q] * w[q * k + t]).sum();
            w[r * k + t] = (rhs[r * k + t] - s) / a[r * d + r];
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn linear_probe_separates_gaussian_blobs() {
        let mut rng = seed::rng(1, "blobs");
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..300 {
            let cl = i % 3;
            data.extend([cl as f64 * 3.0 + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            labels.push(cl);
        }
        let x = Tensor::new(vec![300, 2], data).unwrap();
        let p = Probe::fit(&x, &labels, 3, &ProbeConfig { steps: 400, ..ProbeConfig::default() }).unwrap();
        assert!(p.accuracy(&x, &labels).unwrap() > 0.95);
    }

    #[test]
    fn ridge_recovers_linear_map() {
        let mut rng = seed::rng(2, "ridge");
        let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<Vec<f64>> = rows.iter().map(|r| vec![2.0 * r[0] - r[2] + 0.5]).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let f = fit_ridge(&x, &y).unwrap();
        for (p, t) in f(&x).iter().zip(&y) {
            assert!((p[0] - t[0]).abs() < 1e-2);
        }
    }
}
