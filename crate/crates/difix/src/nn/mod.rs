//! Minimal neural-network substrate: tensors, a reverse-mode tape, named
//! parameter sets, and an adaptive-moment optimizer. Built for desk-scale
//! models where bit-reproducibility and finite-difference checkability
//! matter more than throughput.

pub mod graph;
pub mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

use crate::container::{Container, ContainerError};
use std::collections::BTreeMap;

/// Ordered, named parameter tensors. Order is insertion order and defines
/// the gradient vector layout everywhere.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self.index.get(name).unwrap_or_else(|| panic!("missing param {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("missing param {name}"));
        &mut self.tensors[i]
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

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf in `graph`, returning vars in
    /// parameter order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.leaf(t.clone())).collect()
    }

    pub fn to_container(&self, kind: &str, meta: serde_json::Value) -> Container {
        let mut c = Container::new(kind, meta);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            c.push_f64(name, &t.shape, &t.data);
        }
        c
    }

    /// Loads values from a container into a set with identical layout.
    pub fn load_from_container(&mut self, c: &Container) -> Result<(), ContainerError> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let block = c.block(name)?;
            if block.shape != t.shape {
                return Err(ContainerError::BlockLength {
                    name: name.clone(),
                    got: block.data.len(),
                    want: t.numel(),
                });
            }
            t.data = block.data.iter().map(|&v| v as f64).collect();
        }
        Ok(())
    }
}

/// First-order adaptive-moment optimizer over a flat f64 vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Adam across every tensor of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamAdam {
    states: Vec<Adam>,
}

impl ParamAdam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        Self { states: params.tensors().iter().map(|t| Adam::new(lr, t.numel())).collect() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.states.len());
        for ((state, tensor), grad) in
            self.states.iter_mut().zip(params.tensors_mut()).zip(grads)
        {
            state.step(&mut tensor.data, &grad.data);
        }
    }
}
