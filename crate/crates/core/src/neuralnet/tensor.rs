//! Dense row-major tensors in 64-bit precision.

use crate::gaf::GafMatrix;

/// A dense tensor: a shape and row-major data, always 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Panics unless `data.len()` equals the product of `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "shape {shape:?} needs {expected} values, got {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Wraps a GAF matrix as a single-channel image of shape [1, n, n].
    pub fn from_gaf(g: &GafMatrix) -> Self {
        Tensor {
            shape: vec![1, g.size(), g.size()],
            data: g.as_slice().to_vec(),
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value at (channel, row, col) of a rank-3 tensor.
    pub fn get3(&self, c: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}
