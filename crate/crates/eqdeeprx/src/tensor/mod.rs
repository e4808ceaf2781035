//! Real-valued tensors with reverse-mode autodiff and small complex
//! linear-algebra kernels.
//!
//! The engine covers exactly the layer set the receiver networks need
//! (depthwise/pointwise convolutions, ReLU, nearest-neighbour resampling,
//! a symbol mixer, reductions and loss heads) — it is not a general deep
//! learning framework.

pub mod checkpoint;
pub mod complex;
pub mod gradcheck;
pub mod tape;

pub use complex::{hermitian_solve, CTensor, Complex64, ComplexMatrix};
pub use tape::{Axis, NodeId, Tape};

use crate::{Error, Result};

/// Dense row-major real tensor, optionally carrying a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl RealTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        RealTensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(RealTensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        RealTensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, value: bool) {
        self.requires_grad = value;
        if !value {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor of {} elements",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Checks that every value is finite; `stage` names the pipeline step
    /// in the error.
    pub fn assert_finite(&self, stage: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { stage })
        }
    }
}
