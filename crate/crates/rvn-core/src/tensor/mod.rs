//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain shape + contiguous row-major buffer. Differentiation
//! happens through a [`tape::Tape`]: operations record nodes in append order
//! and `backward` replays them in reverse, accumulating gradients.

pub mod checkpoint;
mod conv;
pub mod optim;
pub mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense N-dimensional array, row-major, cheap to clone (shared buffer).
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![T::zero(); n]) }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![v; n]) }
    }

    /// 0-dimensional-like scalar, stored as shape `[1]`.
    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: Arc::new(vec![v]) }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new((0..n).map(&mut f).collect()) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; clones the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        if Arc::strong_count(&self.data) != 1 {
            self.data = Arc::new(self.data.as_ref().clone());
        }
        Arc::get_mut(&mut self.data).expect("unique after copy-on-write")
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same buffer, new shape (element counts must agree).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({n})",
                self.shape,
                self.numel()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Output extent of a strided convolution along one axis.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if n + 2 * pad < k {
        return Err(Error::Shape(format!(
            "kernel {k} does not fit input extent {n} with padding {pad}"
        )));
    }
    if stride == 0 {
        return Err(Error::Invalid("stride must be >= 1".into()));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Invalid("stride must be >= 1".into()));
    }
    let e = (n - 1) * stride + k;
    if e < 2 * pad {
        return Err(Error::Shape(format!(
            "transposed conv output extent negative: n={n} k={k} stride={stride} pad={pad}"
        )));
    }
    Ok(e - 2 * pad)
}
