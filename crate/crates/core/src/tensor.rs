//! Dense row-major tensors.
//!
//! Image tensors use `H, W, C` layout: the channel index varies fastest, then
//! the column, then the row. Flattening an image tensor is therefore a no-op on
//! the underlying buffer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor rank {0} is outside 1..=4")]
    Rank(usize),
    #[error("tensor extent on axis {axis} is zero")]
    ZeroExtent { axis: usize },
    #[error("dims {dims:?} describe {expected} values but {actual} were given")]
    Length {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        check_dims(&dims)?;
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        check_dims(&dims)?;
        let n = dims.iter().product();
        Ok(Self {
            dims,
            data: vec![0.0; n],
        })
    }

    /// Vector of the given values.
    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a tensor without re-checking finiteness. Used internally by the
    /// layer kernels, which check their outputs once per pass instead.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under new dims with the same element count.
    pub fn reshape(self, dims: Vec<usize>) -> Result<Self, TensorError> {
        check_dims(&dims)?;
        let expected: usize = dims.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::Length {
                dims,
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self {
            dims,
            data: self.data,
        })
    }

    /// Row-major H, W, C linearization to a rank-1 tensor.
    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Self {
            dims: vec![n],
            data: self.data,
        }
    }

    /// Value at a rank-3 `(row, col, channel)` position.
    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        let (w, ch) = (self.dims[1], self.dims[2]);
        self.data[(y * w + x) * ch + c]
    }

    /// Copies one channel of an `H×W×C` tensor out as an `H×W` tensor.
    pub fn channel(&self, c: usize) -> Self {
        let (h, w, ch) = (self.dims[0], self.dims[1], self.dims[2]);
        let data = (0..h * w).map(|p| self.data[p * ch + c]).collect();
        Self::from_parts(vec![h, w], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

fn check_dims(dims: &[usize]) -> Result<(), TensorError> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(TensorError::Rank(dims.len()));
    }
    if let Some(axis) = dims.iter().position(|&d| d == 0) {
        return Err(TensorError::ZeroExtent { axis });
    }
    Ok(())
}
