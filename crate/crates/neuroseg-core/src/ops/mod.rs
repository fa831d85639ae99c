//! Differentiable operators.
//!
//! Each function validates shapes, computes the forward value, and records
//! a backward closure on the output tensor. Nothing here mutates its
//! inputs; batch norm is the one operator with side state (running
//! statistics behind a `RefCell`, updated in training mode only).

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod pool;
mod reduce;
mod view;

pub use conv::{conv3d, conv_transpose3d, unit_conv, upsample_nearest2x};
pub use elementwise::{add, add_scalar, div, mul, relu, scale, sigmoid, sub};
pub use matmul::matmul;
pub use norm::{batchnorm3d, batchnorm_points, Phase, RunningStats};
pub use pool::{pool3d, PoolMode};
pub use reduce::{mean_all, sum_all};
pub use view::{concat, reshape, select_batch, transpose2d};
