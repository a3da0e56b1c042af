//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is two-dimensional and single-threaded per [`Graph`]. `f32`
//! is the working precision; `f64` exists so [`grad_check`] can compare
//! against finite differences.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_STEP};
pub use graph::{Graph, Var};
pub use nn::{
    bind_params, collect_grads, flatten, layer_norm, linear, multi_head_attention,
    multi_head_attention_with_weights, unflatten, AttentionOutput, AttentionParams,
    LayerNormParams, Linear, ParamTree,
};
pub use tensor::{set_sum, Real, Tensor};
