//! Dense `f64` tensors with tape-based reverse-mode differentiation.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, Coordinate, GradCheckReport};
pub use graph::{Graph, Var};
pub use nn::{linear, scaled_dot_attention, BlockShape, LayerNorm, Linear, TransformerBlock, LN_EPS};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tensor::Tensor;
