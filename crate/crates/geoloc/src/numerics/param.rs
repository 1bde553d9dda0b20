//! Named trainable parameters with accumulated gradients.

use crate::error::{Error, Result};
use crate::numerics::autodiff::Gradients;
use crate::numerics::tensor::Tensor;

/// A leaf tensor paired with a gradient buffer of the same shape. The
/// gradient accumulates across `accumulate` calls until `zero_grad`; the
/// name keys optimizer state and checkpoint entries, so it must be unique
/// within a model.
#[derive(Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

impl Parameter {
    /// Wraps `value` as a fresh grad-requiring leaf (any op history is
    /// dropped).
    pub fn new(name: impl Into<String>, value: Tensor) -> Parameter {
        let value = value.tracked();
        let n = value.numel();
        Parameter {
            name: name.into(),
            value,
            grad: vec![0.0; n],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Adds this parameter's share of a backward pass into the gradient
    /// buffer.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if let Some(g) = grads.wrt(&self.value) {
            for (acc, v) in self.grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Replaces the value with same-shaped data; the parameter becomes a new
    /// graph leaf, so tensors derived from the old value are unaffected.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.value.numel() {
            return Err(Error::shape(
                "set_data",
                format!(
                    "parameter {} has {} elements, got {}",
                    self.name,
                    self.value.numel(),
                    data.len()
                ),
            ));
        }
        self.value = Tensor::from_vec(self.value.shape().to_vec(), data)?.tracked();
        Ok(())
    }
}
