//! Reverse-mode automatic differentiation on `f64` ndarrays.
//!
//! Every operation evaluates eagerly and records itself in a dynamic graph of
//! reference-counted nodes. Calling [`grad`] walks the graph backwards and
//! builds the cotangents *out of the same graph operations*, so the returned
//! gradients are themselves differentiable tensors. That property is what the
//! rest of the workspace relies on for gradient-penalty terms, which need
//! d/dθ of ‖∇_u T(u)‖.
//!
//! Design constraints, in order:
//! - correctness in `f64` (every op has a finite-difference test),
//! - higher-order gradients for free (no separate tape replay machinery),
//! - deterministic single-threaded execution for reproducibility.
//!
//! The engine is deliberately small: dense tensors, no views into graph
//! values, shapes validated with panics (callers own argument validation).

mod conv;
mod grad;
pub mod init;
pub mod optim;
mod tensor;

pub use grad::{grad, grad_seeded};
pub use tensor::Tensor;

pub use ndarray;
