//! Dense 64-bit float tensors in row-major order.
//!
//! A tensor optionally carries a handle into the active recording tape (see
//! [`crate::tape`]); the handle is metadata only and never affects forward
//! values. Data is reference-counted so clones and tape snapshots are cheap.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::TapeRef;

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<TapeRef>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data: Arc::new(data), node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_vec(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![0.0; numel])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![1.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Detach from any tape: same data, no recording handle.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub(crate) fn with_node(&self, node: TapeRef) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: Some(node) }
    }

    /// Mutate the underlying data in place (copy-on-write when shared) and
    /// drop any tape handle.
    pub fn map_data_mut(&mut self, f: impl FnOnce(&mut [f64])) {
        self.node = None;
        f(Arc::make_mut(&mut self.data).as_mut_slice());
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

/// I.i.d. standard normal samples of the given shape, reproducible per seed.
pub fn gauss(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0; numel];
    rng.fill_normal(&mut data);
    Tensor::from_vec(shape.to_vec(), data)
}
