//! Dense row-major multi-dimensional arrays with an optional gradient
//! buffer, the storage type for activations and parameters.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. The gradient buffer, when present, always has
/// the same length as `values`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Array<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            values: vec![T::zero(); shape.iter().product()],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Array {
            shape: shape.to_vec(),
            values: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "array of shape {shape:?} needs {expect} values, got {}",
                values.len()
            )));
        }
        Ok(Array { shape: shape.to_vec(), values, grad: None })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Reinterprets the array with a new shape of identical element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                self.shape,
                self.values.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated and zeroed on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.values.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.values.iter()
    }

    /// Casts every element through `f64` into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of64(v.as64())).collect(),
            grad: None,
        }
    }
}
