//! Named parameter tensors with matching gradient and momentum buffers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    velocity: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            velocity: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: &str, value: Tensor) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.grads.push(Tensor::zeros(value.rows, value.cols));
        self.velocity.push(Tensor::zeros(value.rows, value.cols));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    /// Gaussian weights with standard deviation `std`.
    pub fn insert_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> usize {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn insert_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> usize {
        self.insert(name, Tensor::from_vec(rows, cols, vec![v; rows * cols]))
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    /// Overwrites a value; the shape must not change.
    pub fn set_value(&mut self, id: usize, data: &[f64]) {
        assert_eq!(data.len(), self.values[id].data.len(), "parameter shape is fixed");
        self.values[id].data.copy_from_slice(data);
    }

    pub fn grad(&self, id: usize) -> &Tensor {
        &self.grads[id]
    }

    pub fn accumulate_grad(&mut self, id: usize, g: &Tensor) {
        assert_eq!(g.shape(), self.grads[id].shape(), "gradient shape");
        for (a, b) in self.grads[id].data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| &g.data)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data.len()).sum()
    }

    /// Heavy-ball update `v = mu v + g; p -= lr v`.
    pub fn sgd_momentum(&mut self, lr: f64, momentum: f64) {
        for ((p, g), v) in self.values.iter_mut().zip(&self.grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}
