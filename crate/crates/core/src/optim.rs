//! Parameter storage, gradient accumulation, and the Adam-style optimizer.
//!
//! Training loops own a [`ParamStore`]: named tensors with explicit gradient
//! buffers and per-parameter Adam moments. A micro-step binds a subset of the
//! parameters onto a fresh tape, runs backward, and feeds the gradients into
//! [`ParamStore::accumulate`]. After the configured number of micro-steps the
//! loop calls [`ParamStore::step`], which updates *only the parameters that
//! received gradients this cycle*, then zeroes the buffers. Parameters outside
//! the cycle keep their values and moments untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, ValueRef};
use crate::tensor::Tensor;

/// Adam hyperparameters with decoupled weight decay (decay defaults to zero,
/// which reduces the update to plain Adam).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Number of Adam updates applied to this entry (drives bias correction).
    updates: u64,
    /// Whether this entry received gradient in the current accumulation cycle.
    touched: bool,
}

/// Named trainable parameters with explicit gradient and moment buffers.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its id. Names must be unique; they
    /// become checkpoint keys.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let n = value.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            updates: 0,
            touched: false,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Binds the current value of a parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Result<ValueRef> {
        tape.param(id, self.entries[id.0].value.clone())
    }

    /// Adds `grads` into the gradient buffers and marks those entries as part
    /// of the current accumulation cycle.
    pub fn accumulate(&mut self, grads: &BTreeMap<ParamId, Tensor>) -> Result<()> {
        for (&id, g) in grads {
            let entry = self
                .entries
                .get_mut(id.0)
                .ok_or_else(|| Error::Contract(format!("unknown param id {id:?}")))?;
            if g.shape() != entry.value.shape() {
                return Err(Error::Shape {
                    op: "ParamStore::accumulate",
                    detail: format!(
                        "`{}` expects {:?}, got {:?}",
                        entry.name,
                        entry.value.shape(),
                        g.shape()
                    ),
                });
            }
            for (buf, &gi) in entry.grad.iter_mut().zip(g.data()) {
                *buf += gi;
            }
            entry.touched = true;
        }
        Ok(())
    }

    /// Applies one Adam update to every entry touched since the last step,
    /// then zeroes gradients and clears the touched marks. Untouched entries
    /// are skipped entirely: their values, moments, and step counts stay put.
    pub fn step(&mut self, hp: &AdamParams) {
        for entry in self.entries.iter_mut().filter(|e| e.touched) {
            entry.updates += 1;
            let t = entry.updates;
            let bc1 = 1.0 - hp.beta1.powi(t as i32);
            let bc2 = 1.0 - hp.beta2.powi(t as i32);
            let mut data = entry.value.data().to_vec();
            for i in 0..data.len() {
                let g = entry.grad[i];
                entry.m[i] = hp.beta1 * entry.m[i] + (1.0 - hp.beta1) * g;
                entry.v[i] = hp.beta2 * entry.v[i] + (1.0 - hp.beta2) * g * g;
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                data[i] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * data[i]);
            }
            entry.value = Tensor::new(entry.value.shape().to_vec(), data)
                .expect("adam step preserves shape");
            entry.grad.iter_mut().for_each(|g| *g = 0.0);
            entry.touched = false;
        }
    }

    /// Explicitly zeroes all gradient buffers and clears the touched marks.
    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.iter_mut().for_each(|g| *g = 0.0);
            entry.touched = false;
        }
    }

    /// Snapshot of all parameter values keyed by name (checkpoint payload).
    pub fn export(&self) -> BTreeMap<String, Tensor> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }
}
