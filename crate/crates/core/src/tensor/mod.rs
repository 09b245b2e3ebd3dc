//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the universal numeric carrier: a row-major f64 buffer with a
//! shape, an optional gradient buffer, and an optional id linking it to the
//! node a [`Tape`] assigned to it during the current forward pass. The tape is
//! rebuilt from scratch on every forward pass; values stored on it are
//! immutable once recorded.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;


pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{OptimizerKind, OptimizerState};
pub use tape::{Grads, NodeId, Tape};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense n-dimensional array of f64 values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    node_id: Option<NodeId>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(format!(
                "data length {} does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data, grad: None, node_id: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], grad: None, node_id: None }
    }

    /// 2-D constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("from_rows requires at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows requires equal-length rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    /// A 1x1 tensor.
    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![x], grad: None, node_id: None }
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor { shape: vec![rows, cols], data, grad: None, node_id: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(self.is_matrix());
        self.data[row * self.shape[1] + col]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Overwrites the gradient buffer; length must match the data buffer.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "grad length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Node this tensor was registered as on the current tape, if any.
    pub fn node_id(&self) -> Option<NodeId> {
        self.node_id
    }

    pub(crate) fn set_node_id(&mut self, id: NodeId) {
        self.node_id = Some(id);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
