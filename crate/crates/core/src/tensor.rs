//! Dense row-major float64 tensors.
//!
//! Tensors are plain value types: shape plus a flat data buffer. They carry no
//! gradient state of their own; differentiation happens on a [`crate::tape::Tape`]
//! that records operations over tensor values. The inherent methods here are the
//! small set of *plain* (non-recorded) helpers used by samplers, metrics, and
//! data generation, where no gradients are needed.

use crate::error::{Error, Result};

/// Dense row-major tensor over `f64`.
///
/// Invariants: every dimension is positive, and `data.len()` equals the product
/// of the dimensions. Tensors are immutable after creation; all helpers return
/// new values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape matches the buffer length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("shape {shape:?} wants {numel} elements, buffer has {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zeros: shape must be valid")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: shape must be valid")
    }

    /// A single-element tensor of shape `[1]`; reductions also produce this shape.
    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape { op: "Tensor::from_rows", detail: "no rows".into() });
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape { op: "Tensor::from_rows", detail: "ragged rows".into() });
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero-size tensors are rejected at construction
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!("expected scalar, got shape {:?}", self.shape)))
        }
    }

    /// Number of matrix rows; errors on non-rank-2 tensors.
    pub fn rows(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [r, _] => Ok(*r),
            other => Err(Error::Shape {
                op: "Tensor::rows",
                detail: format!("expected matrix, got shape {other:?}"),
            }),
        }
    }

    pub fn cols(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [_, c] => Ok(*c),
            other => Err(Error::Shape {
                op: "Tensor::cols",
                detail: format!("expected matrix, got shape {other:?}"),
            }),
        }
    }

    /// Borrow row `i` of a matrix.
    pub fn row(&self, i: usize) -> Result<&[f64]> {
        let (r, c) = (self.rows()?, self.cols()?);
        if i >= r {
            return Err(Error::Shape {
                op: "Tensor::row",
                detail: format!("row {i} out of range for {r} rows"),
            });
        }
        Ok(&self.data[i * c..(i + 1) * c])
    }

    /// Same data under a new shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// A rank-1 vector viewed as a `[1, n]` single-row matrix.
    pub fn as_row_matrix(&self) -> Result<Self> {
        match self.shape.as_slice() {
            [n] => self.reshaped(vec![1, *n]),
            [1, _] => Ok(self.clone()),
            other => Err(Error::Shape {
                op: "Tensor::as_row_matrix",
                detail: format!("expected vector or single row, got {other:?}"),
            }),
        }
    }

    /// A `[1, n]` matrix viewed as a rank-1 vector.
    pub fn as_vector(&self) -> Result<Self> {
        match self.shape.as_slice() {
            [_] => Ok(self.clone()),
            [1, n] => self.reshaped(vec![*n]),
            other => Err(Error::Shape {
                op: "Tensor::as_vector",
                detail: format!("expected vector or single row, got {other:?}"),
            }),
        }
    }

    /// Elementwise map (plain, not recorded on any tape).
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combination of two same-shape tensors (plain).
    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "Tensor::zip",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    pub fn plus(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn minus(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "Tensor::dot",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_buffer() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn row_and_reshape_round_trip() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.row(1).unwrap(), &[3.0, 4.0]);
        let v = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = v.as_row_matrix().unwrap();
        assert_eq!(r.shape(), &[1, 3]);
        assert_eq!(r.as_vector().unwrap(), v);
    }

    #[test]
    fn plain_arithmetic() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.plus(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(b.sq_norm(), 25.0);
        assert_eq!(a.dot(&b).unwrap(), 11.0);
        assert!(a.plus(&Tensor::scalar(1.0)).is_err());
    }
}
