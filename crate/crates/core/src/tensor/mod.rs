//! Minimal dense tensor engine with reverse-mode differentiation.
//!
//! Everything the encoder stacks need lives here: a flat row-major
//! [`Tensor`], named [`Parameter`]s collected in a [`ParamSet`], a
//! computation [`Graph`](graph::Graph) records forward ops and replays them
//! in reverse for gradients, and [`grad_check`](gradcheck::grad_check)
//! compares analytic gradients against central differences.

mod gradcheck;
mod graph;
mod snapshot;

pub use gradcheck::{grad_check, GradCheckReport, LossEval};
pub use graph::{Graph, NodeId};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn row(data: Vec<S>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view of a 1-d or 2-d tensor; 1-d is a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::ShapeMismatch(format!(
                "expected 1-d or 2-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Lossless element-type conversion (f64 snapshots -> f32 inference).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// A named, optionally trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
///
/// Iteration order is insertion order and is the canonical order for
/// optimizer updates and snapshots, so runs stay reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S: Scalar> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name: {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<S>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<S>> {
        self.index.get(name).copied().map(|i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of stored values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.insert(&p.name, p.tensor.cast::<T>(), p.trainable)
                .expect("names unique by construction");
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        snapshot::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<ParamSet<S>> {
        snapshot::load(path)
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        snapshot::to_bytes(self)
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<ParamSet<S>> {
        snapshot::from_bytes(bytes)
    }
}

/// Lazily binds parameters into a graph as leaves, at most once each.
///
/// Sharing matters: the base encoder runs over prototypes and candidates in
/// the same graph, and gradients for a shared weight must accumulate on a
/// single leaf.
pub struct ParamBinder<'a, S: Scalar> {
    params: &'a ParamSet<S>,
    bound: HashMap<String, NodeId>,
    with_grads: bool,
}

impl<'a, S: Scalar> ParamBinder<'a, S> {
    pub fn new(params: &'a ParamSet<S>, with_grads: bool) -> Self {
        Self {
            params,
            bound: HashMap::new(),
            with_grads,
        }
    }

    pub fn bind(&mut self, g: &mut Graph<S>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter: {name}")))?;
        let (rows, cols) = p.tensor.dims2()?;
        let id = g.leaf_from(
            rows,
            cols,
            p.tensor.data().to_vec(),
            self.with_grads && p.trainable,
        )?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients of every bound parameter after a backward pass.
    pub fn collect_grads(&self, g: &Graph<S>) -> std::collections::BTreeMap<String, Vec<S>> {
        self.bound
            .iter()
            .map(|(name, &id)| (name.clone(), g.grad(id).to_vec()))
            .collect()
    }
}

/// Numerically stable softmax of a vector (max-subtraction).
///
/// Entries must be finite; the output is positive and sums to 1.
pub fn softmax<S: Scalar>(v: &[S]) -> Result<Vec<S>> {
    if v.is_empty() {
        return Err(Error::Invalid("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked<S: Scalar>(v: &[S]) -> Vec<S> {
    let mut max = v[0];
    for &x in &v[1..] {
        if x > max {
            max = x;
        }
    }
    let mut out: Vec<S> = v.iter().map(|&x| (x - max).exp()).collect();
    let mut sum = S::zero();
    for &e in &out {
        sum += e;
    }
    for e in &mut out {
        *e = *e / sum;
    }
    out
}

/// Layer normalization of one vector with population variance.
pub fn layer_norm<S: Scalar>(v: &[S], gamma: &[S], beta: &[S], eps: S) -> Result<Vec<S>> {
    if v.len() != gamma.len() || v.len() != beta.len() {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm lengths differ: v={}, gamma={}, beta={}",
            v.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if v.is_empty() {
        return Err(Error::Invalid("layer_norm of empty vector".into()));
    }
    if eps <= S::zero() {
        return Err(Error::Invalid("layer_norm eps must be positive".into()));
    }
    let n = S::from_f64(v.len() as f64);
    let mut mean = S::zero();
    for &x in v {
        mean += x;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &x in v {
        let d = x - mean;
        var += d * d;
    }
    var = var / n;
    let denom = (var + eps).sqrt();
    Ok(v.iter()
        .zip(gamma.iter().zip(beta.iter()))
        .map(|(&x, (&g, &b))| g * ((x - mean) / denom) + b)
        .collect())
}
