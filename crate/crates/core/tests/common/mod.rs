//! Shared helpers for integration tests.
#![allow(dead_code)]

use std::io::Write;

use viprom::autograd::{Graph, Var};
use viprom::{ParamSet, Tensor};

/// Central-difference derivative of `f` with respect to every entry of `x`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = f(&xs);
        xs[i] = orig - h;
        let down = f(&xs);
        xs[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Largest relative error, with a `1e-6` floor on the denominator so
/// near-zero components do not dominate.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Gradient of a scalar graph function of one input tensor, by the tape
/// and by central differences. `build` maps the input variable to the loss.
pub fn tape_vs_fd(shape: &[usize], x: &[f64], h: f64, build: impl Fn(&mut Graph<f64>, Var) -> Var) -> (Vec<f64>, Vec<f64>) {
    let eval = |xs: &[f64]| {
        let mut g = Graph::new();
        let v = g.param(Tensor::new(shape.to_vec(), xs.to_vec()).unwrap());
        let l = build(&mut g, v);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let v = g.param(Tensor::new(shape.to_vec(), x.to_vec()).unwrap());
    let l = build(&mut g, v);
    let grads = g.backward(l).unwrap();
    (grads.get(v).unwrap().to_vec(), central_difference(x, h, eval))
}

/// Perturb selected scalar entries of a parameter set; `(name, index)` pairs.
pub fn with_entry(params: &ParamSet<f64>, name: &str, idx: usize, value: f64) -> ParamSet<f64> {
    let mut p = params.clone();
    for (n, t) in p.iter_mut() {
        if n == name {
            t.data_mut()[idx] = value;
        }
    }
    p
}

/// Write straight to the process stderr so the line survives output capture.
pub fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

pub fn majority(pairs: &[(f64, f64)], holds: impl Fn(f64, f64) -> bool) -> bool {
    pairs.iter().filter(|(a, b)| holds(*a, *b)).count() * 2 > pairs.len()
}
