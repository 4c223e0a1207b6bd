//! Dense tensors, a recording graph with reverse-mode gradients, and a
//! finite-difference checker.

mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod real;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_mixed, grad_check_probe, grad_check_with_params, CheckFn, Probe,
};
pub use graph::{BackwardFn, ConvGeometry, Gradients, Graph, Var};
pub use ops::{bilinear_taps, sigmoid, LAYER_NORM_EPS};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
