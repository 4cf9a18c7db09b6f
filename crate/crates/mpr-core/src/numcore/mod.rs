//! Minimal dense-tensor numeric core: f64 storage, a reverse-mode autodiff
//! tape over a fixed op set, layer helpers, AdamW and initializers.
//!
//! Everything is 64-bit and single-threaded per training run; determinism
//! is bit-exact for a fixed seed.

pub mod checkpoint;
pub mod init;
pub mod nn;
pub mod optim;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use init::{orthogonal_init, zero_init};
pub use nn::{Linear, ParamStore};
pub use optim::{AdamW, OptimizerState};
pub use tape::{Tape, TapeGrads, VarId};

use crate::error::{CoreError, CoreResult};

/// Dense row-major f64 tensor of rank 0..=2.
///
/// Rank-0 is stored as shape `[]` with one element; rank-1 as `[n]`;
/// rank-2 as `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> CoreResult<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(CoreError::config(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows when viewed as a matrix (rank 0 and 1 are a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
