use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Gradients, Tape, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    tensors: BTreeMap<String, Matrix>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Parameters whose names satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Params {
        Params {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Records every parameter on `tape`; those selected by `trainable`
    /// become gradient-carrying leaves, the rest constants.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        BoundParams {
            handles: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let t = if trainable(k) {
                        tape.param(v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), t)
                })
                .collect(),
        }
    }
}

/// Tape handles for a [`Params`] set.
#[derive(Debug, Clone)]
pub struct BoundParams {
    handles: BTreeMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.handles
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter `{name}`")))
    }

    /// Gradients for every bound parameter that received one.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.handles
            .iter()
            .filter_map(|(k, &t)| grads.get(t).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Parameters absent from `grads` are left
/// untouched (their moments are not advanced either).
pub fn adam_step(
    params: &mut Params,
    grads: &BTreeMap<String, Matrix>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
        for i in 0..g.data().len() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
