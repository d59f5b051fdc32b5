//! Reverse-mode differentiation over dense row-major tensors.
//!
//! The substrate is deliberately small: a recorded [`Graph`] of coarse
//! primitives (linear maps, convolutions, normalization, attention pieces)
//! whose backward rules are hand-written and checked against central finite
//! differences by [`grad_check`].

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    conv_upsample_block, multi_head_attention, AttentionOutput, AttentionOverride, AttentionParams, AttentionScale,
    ConvParams, LayerNormParams, LinearParams,
};
pub use params::{Init, ManifestEntry, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
