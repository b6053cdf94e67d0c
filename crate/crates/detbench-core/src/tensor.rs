//! Dense row-major `f64` tensors.
//!
//! Tensors are immutable after construction; the buffer is shared through an
//! `Arc`, so clones are cheap and safe to pass across worker threads. Every
//! public constructor rejects NaN and infinities, so downstream code can rely
//! on finite values throughout.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from a shape and a row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor construction",
                left: shape,
                right: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch {
                context: "scalar_value",
                left: self.shape.clone(),
                right: vec![1],
            });
        }
        Ok(self.data[0])
    }

    /// Pointwise map; the closure must return finite values.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, other: &Self, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Self::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.map(|v| v * factor)
    }

    /// Pointwise sign with sign(0) = 0. Forward-only: never part of a loss graph.
    pub fn sign(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    /// Pointwise clamp onto [lo, hi]. Forward-only: the L-infinity projection primitive.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "clamp bounds inverted: lo={lo} > hi={hi}"
            )));
        }
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.numel() as f64
    }

    /// Replace one coordinate, returning a new tensor. Used by the
    /// finite-difference oracle; not a hot path.
    pub fn with_value_at(&self, index: usize, value: f64) -> Result<Self> {
        let mut data = self.data.as_ref().clone();
        data[index] = value;
        Self::new(self.shape.clone(), data)
    }
}

/// Central-difference gradient of `f` at `x`: (f(x + h e_i) - f(x - h e_i)) / 2h.
///
/// Test oracle for reverse-mode gradients; O(numel) evaluations of `f`.
pub fn finite_difference_gradient(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let v = x.data()[i];
        let fp = f(&x.with_value_at(i, v + h)?)?;
        let fm = f(&x.with_value_at(i, v - h)?)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shape_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn sign_of_zero_is_zero() {
        let t = Tensor::new(vec![3], vec![-2.5, 0.0, 7.0]).unwrap();
        assert_eq!(t.sign().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn clamp_projects_onto_unit_box() {
        let t = Tensor::new(vec![3], vec![-0.2, 0.5, 1.3]).unwrap();
        assert_eq!(t.clamp(0.0, 1.0).unwrap().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn clamp_rejects_inverted_bounds() {
        let t = Tensor::zeros(vec![2]);
        assert!(t.clamp(1.0, 0.0).is_err());
    }

    #[test]
    fn finite_difference_on_sum_is_all_ones() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 4.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-3).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_difference_on_square_is_exact() {
        // Central differences are exact for quadratics up to rounding.
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-3).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }
}
