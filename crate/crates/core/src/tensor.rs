//! Dense row-major `f64` tensors.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense tensor with row-major storage.
///
/// Every extent is positive, the element count matches the shape and all
/// entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = checked_numel(&shape)?;
        if expected != data.len() {
            return Err(Error::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteInput { index, value });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose finiteness is already guaranteed by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    /// A single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor rank is at least 1")
    }

    /// Number of rows when viewed as `[leading, last_dim]`.
    pub fn outer_len(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    /// Row `r` of a matrix view `[outer_len, last_dim]`.
    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    /// Element `(r, c)` of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.last_dim() + c]
    }

    /// Rows selected by index, as a new `[indices.len(), last_dim]` matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let w = self.last_dim();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_parts(vec![indices.len(), w], data)
    }

    /// Replaces the value at a flat index; the value must be finite.
    pub fn set(&mut self, index: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFiniteInput { index, value });
        }
        self.data[index] = value;
        Ok(())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::EmptyExtent(shape.to_vec()));
    }
    Ok(shape.iter().product())
}
