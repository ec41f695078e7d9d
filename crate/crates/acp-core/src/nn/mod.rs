//! Minimal deterministic differentiable-computation layer: matrices, named
//! parameters, dense layers, activations, losses, optimizers, and a
//! finite-difference gradient checker. Everything is 64-bit and seeded.

pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod optim;
pub mod store;

pub use gradcheck::finite_diff_check;
pub use matrix::Matrix;
pub use ops::{
    bce, bce_grad, ce_softmax, relu, relu_backward, sigmoid, sigmoid_backward, softmax_row,
    softmax_row_backward, DenseLayer, EPS_PROB,
};
pub use optim::{sgd_step, Adam};
pub use store::ParamStore;
