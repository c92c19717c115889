//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The centerpiece is [`Tape`]: a Wengert list that records primitive
//! operations during the forward pass and replays them in reverse to
//! accumulate gradients. Tensors living on a tape are addressed by [`Var`]
//! handles; free-standing values use [`Tensor`].
//!
//! Besides the usual layer primitives (convolution, linear, pooling, batch
//! norm, softmax, cross-entropy) the op set includes the surrogate-gradient
//! primitives the architecture optimizers need: a binarizing Heaviside step
//! with a straight-through backward, Gumbel-Softmax sampling, and two fake
//! quantizers (symmetric min-max for weights, learned-clip PACT for
//! activations).

mod scalar;
mod tape;

pub mod check;
pub mod ops;


pub use scalar::Scalar;
pub use tape::{Tape, Var};

use crate::error::{ForgeError, Result};

/// Dense n-dimensional float array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Build from raw parts. Fails unless `product(shape) == data.len()`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(ForgeError::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(ForgeError::shape(format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::ZERO; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::ONE)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(ForgeError::shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element-wise cast to another scalar type (used by the 64-bit check mode).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}
