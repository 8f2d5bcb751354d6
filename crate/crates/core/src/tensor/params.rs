//! Named trainable parameters and the optimizer step.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone)]
struct Entry<T: Scalar> {
    tensor: Tensor<T>,
    moment1: Vec<T>,
    moment2: Vec<T>,
    step: u64,
}

/// Ordered map from canonical parameter name to tensor, plus per-parameter
/// adaptive-moment state. Iteration order is lexicographic by name, which
/// makes optimizer updates and serialization deterministic.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) {
        tensor.requires_grad = true;
        let numel = tensor.numel();
        self.entries.insert(
            name.into(),
            Entry {
                tensor,
                moment1: vec![T::ZERO; numel],
                moment2: vec![T::ZERO; numel],
                step: 0,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lexicographic iteration over `(name, tensor)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total number of trainable scalar values.
    pub fn count_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[T]) -> Result<()> {
        let entry = self.entries.get_mut(name).ok_or_else(|| Error::UnknownParameter {
            name: name.to_string(),
        })?;
        entry.tensor.accumulate_grad(g);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.clear_grad();
        }
    }

    /// One optimizer step over every parameter. All parameters must carry a
    /// gradient; Adam uses decay rates 0.9/0.999, stabilizer 1e-8 and bias
    /// correction.
    pub fn step(&mut self, kind: OptimizerKind, lr: f64) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            let grad = e.tensor.grad.as_ref().ok_or_else(|| Error::MissingGradient {
                name: name.clone(),
            })?;
            match kind {
                OptimizerKind::Sgd => {
                    let lr = T::from_f64(lr);
                    for (p, g) in e.tensor.data.iter_mut().zip(grad) {
                        *p = *p - lr * *g;
                    }
                }
                OptimizerKind::Adam => {
                    e.step += 1;
                    let b1 = T::from_f64(0.9);
                    let b2 = T::from_f64(0.999);
                    let one_m_b1 = T::from_f64(0.1);
                    let one_m_b2 = T::from_f64(0.001);
                    let eps = T::from_f64(1e-8);
                    let c1 = T::from_f64(1.0 - 0.9f64.powi(e.step as i32));
                    let c2 = T::from_f64(1.0 - 0.999f64.powi(e.step as i32));
                    let lr = T::from_f64(lr);
                    for ((p, g), (m, v)) in e
                        .tensor
                        .data
                        .iter_mut()
                        .zip(grad)
                        .zip(e.moment1.iter_mut().zip(e.moment2.iter_mut()))
                    {
                        *m = b1 * *m + one_m_b1 * *g;
                        *v = b2 * *v + one_m_b2 * *g * *g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
