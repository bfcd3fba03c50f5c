//! Differentiable primitives.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod pool;
pub mod reduce;
pub mod shape;
pub mod softmax;

pub use conv::{conv3d, conv3d_output_dims, conv_transpose3d, conv_transpose3d_output_dims};
pub use elementwise::{
    add, add_scalar, add_trailing, affine_scalar, div, exp, gelu_tanh, ln, mul, mul_scalar, pointwise, relu,
    sub, Pointwise,
};
pub use linalg::{linear, matmul};
pub use norm::{batch_norm3d, layer_norm, BatchNormMode, RunningStats, BN_MOMENTUM, NORM_EPS};
pub use pool::maxpool3d;
pub use reduce::{mean, sum, sum_keep_axis};
pub use shape::{concat, permute, reshape};
pub use softmax::softmax;
