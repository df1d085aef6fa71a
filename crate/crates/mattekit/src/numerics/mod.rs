//! Deterministic tensor substrate: dense arrays, the model's forward
//! kernels, seeded randomness, named parameters, tape autodiff, and
//! finite-difference gradient validation.
//!
//! Tensors are immutable once produced by an operation; parameters are
//! mutated only inside a training step. Everything is plain f64 on the CPU.

mod gradcheck;
mod graph;
mod param;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, GRAD_CHECK_EPS};
pub use graph::{Grads, NodeId, Tape};
pub use param::{ParamSet, Parameter};
pub use rng::SeededRng;
pub use tensor::{bilinear_resize, conv2d, softmax_rows, Tensor};
