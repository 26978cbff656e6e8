//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! All learned computation in this crate runs on the [`Graph`] tape: every
//! operation computes its forward value eagerly on insertion and records the
//! inputs and saved state its backward pass needs. Values are 32-bit floats
//! throughout; shapes are explicit (the only broadcast anywhere is the bias
//! term inside `conv2d`).

mod checkpoint;
mod graph;
mod ops;
mod params;

pub mod gradcheck;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use graph::{Graph, Var};
pub use params::{he_conv_init, he_conv_init_into, sgd_step, MomentumSgd, ParamSet};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor {
            data: vec![value; shape.iter().product()],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0-like scalar stored as shape `[1]`.
    pub fn scalar(value: f32) -> Self {
        Tensor::from_vec(&[1], vec![value]).unwrap()
    }

    /// Build from raw data; fails unless `product(shape) == data.len()`.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Mark this tensor as a leaf that accumulates gradients.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) {
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Vec<f32>> {
        self.grad.as_mut()
    }

    pub(crate) fn clear_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Value at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f32 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    /// True when every element is a normal, finite float.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
