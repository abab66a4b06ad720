//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] is an eager tape: ops compute their value immediately and record
//! a closure for the backward sweep. Only the operations a convolutional
//! encoder/decoder needs are provided.

mod conv;
mod graph;
mod ops;
mod scalar;

pub use conv::{conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward, ConvGeometry};
pub use graph::{Gradients, Graph, Var};
pub use ops::{interp_axis_array, linear_taps};
pub use scalar::Scalar;

pub use ndarray;
