//! Named parameter sets and their binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Flat, name-ordered parameter table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Tensor<T>>,
}

/// Parameter names bound to graph variables for one step.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("parameter {name} is not bound")))
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self { params: self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            params: self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn without_prefix(&self, prefix: &str) -> Self {
        Self {
            params: self.params.iter().filter(|(k, _)| !k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Entries matching none of `prefixes`.
    pub fn without_prefixes(&self, prefixes: &[String]) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| !prefixes.iter().any(|p| k.starts_with(p.as_str())))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamSet<T>) {
        self.params.extend(other.params);
    }

    /// Same names and shapes.
    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(format!("{} parameters", self.params.len()), format!("{} parameters", other.params.len())));
        }
        for ((ka, va), (kb, vb)) in self.params.iter().zip(&other.params) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::shape(format!("{ka} {:?}", va.shape()), format!("{kb} {:?}", vb.shape())));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.input(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for every bound parameter; absent gradients are zero.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Grads<T>) -> Self {
        let params = self
            .params
            .iter()
            .map(|(k, v)| {
                let g = bound
                    .vars
                    .get(k)
                    .and_then(|&var| grads.take(var))
                    .map(|d| Tensor::new(v.shape().to_vec(), d).expect("gradient shape"))
                    .unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect();
        Self { params }
    }

    pub fn global_norm(&self) -> f64 {
        self.params.values().map(|t| t.sq_norm().as_f64()).sum::<f64>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// SHA-256 over names, shapes, and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (k, v) in &self.params {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Euclidean distance between two aligned sets.
    pub fn distance(&self, other: &Self) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Uniform fan-in scaled initialisation with variance `1 / fan_in`.
pub fn fan_in_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| c::<T>(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

pub fn init_linear<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    ps.insert(format!("{name}.w"), fan_in_uniform(rng, &[fan_in, fan_out], fan_in, gain));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_conv<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
    let fan_in = cin * k * k;
    ps.insert(format!("{name}.w"), fan_in_uniform(rng, &[cout, cin, k, k], fan_in, gain));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    g.linear(x, w, bias)
}

pub fn conv<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    g.conv2d(x, w, bias, stride, pad)
}
