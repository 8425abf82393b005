//! Named parameter collections and the layer building blocks shared by the
//! denoiser, the condition adapter and the reference encoder.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered set of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }

    /// Checks that `other` has the same names and shapes, in the same order.
    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter names differ".into()));
        }
        for ((name, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { set: self, vars }
    }
}

/// A [`ParamSet`] registered on a graph.
#[derive(Debug)]
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        match self.set.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("missing parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn init_conv(set: &mut ParamSet, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) {
    let fan_in = c_in * k * k;
    set.insert(format!("{name}.weight"), uniform_init(&[c_out, c_in, k, k], fan_in, rng));
    set.insert(format!("{name}.bias"), uniform_init(&[c_out], fan_in, rng));
}

pub fn init_linear(set: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) {
    set.insert(format!("{name}.weight"), uniform_init(&[d_out, d_in], d_in, rng));
    set.insert(format!("{name}.bias"), uniform_init(&[d_out], d_in, rng));
}

pub fn init_group_norm(set: &mut ParamSet, name: &str, channels: usize) {
    set.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
    set.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
}

pub fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = p.var(&format!("{name}.weight"));
    let b = p.var(&format!("{name}.bias"));
    g.conv2d(x, w, Some(b), stride, pad)
}

pub fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let w = p.var(&format!("{name}.weight"));
    let b = p.var(&format!("{name}.bias"));
    g.linear(x, w, Some(b))
}

pub fn group_norm(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let channels = g.shape(x)[1];
    let gamma = p.var(&format!("{name}.gamma"));
    let beta = p.var(&format!("{name}.beta"));
    g.group_norm(x, gamma, beta, groups_for(channels))
}

/// Largest group count up to 8 that divides `channels`.
pub fn groups_for(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}
