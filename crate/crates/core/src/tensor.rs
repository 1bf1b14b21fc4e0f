use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major 64-bit float array with an optional gradient accumulator.
///
/// Invariants: `values.len() == shape.iter().product()`, and `grad`, when
/// present, has the same length as `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Attach a zeroed gradient accumulator.
    pub fn with_grad(mut self) -> Self {
        let n = self.values.len();
        self.grad = Some(vec![0.0; n]);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Add `scale * delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[f64], scale: f64) {
        if let Some(g) = &mut self.grad {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += scale * di;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Check that every element is finite; used by forward ops so non-finite
/// values surface as errors instead of propagating.
pub fn ensure_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_checked() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        let t = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn grad_matches_shape() {
        let t = Tensor::zeros(&[3, 4]).with_grad();
        assert_eq!(t.grad().unwrap().len(), t.len());
    }

    #[test]
    fn accumulate_is_additive() {
        let mut t = Tensor::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0], 1.0);
        t.accumulate_grad(&[1.0, 2.0], 0.5);
        assert_eq!(t.grad().unwrap(), &[1.5, 3.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}
