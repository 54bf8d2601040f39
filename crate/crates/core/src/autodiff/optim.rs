use std::collections::HashMap;
use std::f64::consts::PI;

use thiserror::Error;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {name} at element {index}")]
    NonFinite { name: String, index: usize },
    #[error("gradient for {name} has shape {got:?}, parameter has {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} gradients, got {got}")]
    Count { expected: usize, got: usize },
    #[error("unknown parameter {0}")]
    Unknown(String),
}

/// Ordered collection of named parameter tensors, each tagged with a
/// learning-rate group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    groups: Vec<usize>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            groups: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, group: usize) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let i = self.names.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.groups.push(group);
        self.index.insert(name.to_string(), i);
        i
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

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn group(&self, i: usize) -> usize {
        self.groups[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and groups with converted element type.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            groups: self.groups.clone(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Cosine annealing factor `0.5 (1 + cos(pi * epoch / total))`.
pub fn cosine_factor(epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos())
}

/// Adam with bias correction and per-group base learning rates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    group_lr: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<T: Real>(params: &ParamSet<T>, group_lr: Vec<f64>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            group_lr,
            m: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `lr_scale` multiplies every group rate (schedule factor).
    /// Parameters are left untouched when any gradient is non-finite.
    pub fn step<T: Real>(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Tensor<T>],
        lr_scale: f64,
    ) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::Count {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            let name = &params.names[i];
            if g.shape() != params.tensors[i].shape() {
                return Err(OptimError::Shape {
                    name: name.clone(),
                    expected: params.tensors[i].shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFinite {
                    name: name.clone(),
                    index,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let lr = self.group_lr[params.groups[i]] * lr_scale;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.tensors[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k].to_f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                let upd = lr * mh / (vh.sqrt() + self.eps);
                p[k] = T::lit(p[k].to_f64() - upd);
            }
        }
        Ok(())
    }
}
