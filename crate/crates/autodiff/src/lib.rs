//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Storage is row-major; volumetric tensors use the axis order
//! `[batch, channel, W, H, D]`. There is no implicit broadcasting apart from
//! [`ops::add_trailing`] (bias over trailing axes) and the scalar ops.

mod element;
mod error;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Sampling};
pub use tape::ComputationTape;
pub use tensor::{strides_of, Backward, BackwardCtx, Tensor};

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ops::sub(self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mul(self, other)
    }

    pub fn relu(&self) -> Tensor<T> {
        ops::relu(self)
    }

    pub fn sum(&self) -> Tensor<T> {
        ops::sum(self)
    }

    pub fn mean(&self) -> Tensor<T> {
        ops::mean(self)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        ops::reshape(self, shape)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        ops::permute(self, perm)
    }
}
