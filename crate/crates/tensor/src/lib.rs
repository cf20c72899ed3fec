//! Dense tensors, a tape-based reverse-mode autodiff graph and AdamW.
//!
//! Training runs in `f32`; the same code is instantiated at `f64` for
//! finite-difference gradient checks.

pub mod conv;
mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, random_suite, GradCheckReport, SuiteCase};
pub use graph::{ConvParams, Gradients, Graph, Var};
pub use optim::{AdamWConfig, Bindings, OptimizerState, ParamStore, Parameter, StepInfo};
pub use tensor::{DType, Scalar, Tensor, ToBits};
