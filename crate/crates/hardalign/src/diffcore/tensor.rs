//! Dense row-major tensors of 64-bit reals.

use crate::error::{Error, Result};

/// A dense tensor. Rank 0 (empty shape) is a scalar, rank 1 a vector,
/// rank 2 a matrix in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::validation(format!(
                "tensor data length {} does not match shape {:?} (wants {})",
                data.len(),
                shape,
                want
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major matrix with `rows * cols` entries.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Value of a scalar tensor.
    /// Value of a scalar tensor; panics on non-scalars, which indicates a
    /// shape bug rather than a recoverable condition.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on non-scalar tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Errors if any entry is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite value {v} at index {i} in {context}"
                )));
            }
        }
        Ok(())
    }
}
