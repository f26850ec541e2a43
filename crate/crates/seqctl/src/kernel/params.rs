//! Named parameter storage and the Adam optimizer.

use super::array::Array;
use super::graph::KernelError;
use std::collections::HashMap;

pub type ParamId = usize;

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub grad: Array,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let grad = Array::zeros(value.shape().to_vec());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.params[id].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn grad_global_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all gradients so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for p in &mut self.params {
                for g in p.grad.data_mut() {
                    *g *= s;
                }
            }
        }
    }

    /// Immutable snapshot of all parameter values, in insertion order.
    pub fn snapshot(&self) -> Vec<(String, Array)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites values by name; every snapshot entry must exist with a
    /// matching shape.
    pub fn load_values(&mut self, values: &[(String, Array)]) -> Result<(), KernelError> {
        for (name, arr) in values {
            let id = self.by_name.get(name).copied().ok_or_else(|| KernelError::Shape {
                op: "load_values",
                left: arr.shape().to_vec(),
                right: vec![],
            })?;
            if self.params[id].value.shape() != arr.shape() {
                return Err(KernelError::Shape {
                    op: "load_values",
                    left: self.params[id].value.shape().to_vec(),
                    right: arr.shape().to_vec(),
                });
            }
            self.params[id].value = arr.clone();
        }
        Ok(())
    }
}

pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.iter().map(|p| Array::zeros(p.value.shape().to_vec())).collect(),
            v: store.iter().map(|p| Array::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    /// One Adam update with bias correction over all parameters in the
    /// store, consuming their current gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), KernelError> {
        for p in store.iter() {
            if !p.grad.all_finite() {
                return Err(KernelError::NonFiniteGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (idx, (m, v)) in self.m.iter_mut().zip(self.v.iter_mut()).enumerate() {
            let grad = store.grad(idx).clone();
            for ((mi, vi), &gi) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(grad.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let value = store.value_mut(idx);
            for ((pv, &mi), &vi) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
