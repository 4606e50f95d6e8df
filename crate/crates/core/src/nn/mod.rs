//! Minimal differentiable kernels: a dense row-major matrix, a named
//! parameter store, hand-derived forward/backward pairs, Adam and a
//! central-difference gradient checker.

mod adam;
mod grad_check;
mod kernels;
mod matrix;
mod params;

pub use adam::{adam_step, AdamState};
pub use grad_check::{grad_check, GradCheckConfig, GradCheckReport};
pub use kernels::{
    dropout, l2_normalize_rows, l2_normalize_rows_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, relu, relu_backward, softmax_rows, softmax_rows_backward, DropoutMask,
    LayerNormCache, LayerNormGrads, Linear, LinearGrads,
};
pub use matrix::Matrix;
pub use params::{Param, ParamId, ParamStore};
