//! Dense N-dimensional value tensors.
//!
//! `Tensor` is the plain, immutable-by-convention value type. Differentiable
//! computation happens on a [`crate::tape::Tape`], which wraps tensors in
//! tracked nodes; everything else (datasets, checkpoints, oracles) works on
//! raw tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense tensor. `shape == []` is a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![E::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_f64s(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Convert elements to another scalar type (f32 <-> f64).
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }
}

// ── broadcasting ─────────────────────────────────────────────────────

/// Right-aligned broadcast of two shapes: each trailing dimension must be
/// equal or 1. Returns the output shape.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for d in 0..ndim {
        // dimension d of each shape once left-padded with 1s to ndim
        let da = if d + a.len() >= ndim { a[d + a.len() - ndim] } else { 1 };
        let db = if d + b.len() >= ndim { b[d + b.len() - ndim] } else { 1 };
        out[d] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Flat index into `shape` (left-padded with 1s to `out_shape.len()`) of the
/// element feeding position `out_idx` of the broadcast result.
pub fn broadcast_src_index(out_idx: usize, out_shape: &[usize], shape: &[usize]) -> usize {
    let ndim = out_shape.len();
    let offset = ndim - shape.len();
    let mut remaining = out_idx;
    let mut src = 0usize;
    let mut src_stride = 1usize;
    for d in (0..ndim).rev() {
        let coord = remaining % out_shape[d];
        remaining /= out_shape[d];
        if d >= offset {
            let sd = d - offset;
            if shape[sd] != 1 {
                src += coord * src_stride;
            }
            src_stride *= shape[sd];
        }
    }
    src
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by collapsing
/// broadcast dimensions. Used by backward rules of broadcasting ops.
pub fn reduce_to_shape<E: Scalar>(
    grad: &[E],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Tensor<E> {
    if grad_shape == target_shape {
        return Tensor { shape: target_shape.to_vec(), data: grad.to_vec() };
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![E::zero(); target_numel];
    for (i, &g) in grad.iter().enumerate() {
        let src = broadcast_src_index(i, grad_shape, target_shape);
        out[src] += g;
    }
    Tensor { shape: target_shape.to_vec(), data: out }
}
