//! Dense `f64` tensors, a tape-based reverse-mode autodiff, and a toy
//! mixture-of-experts transformer whose residual connectivity between
//! sub-blocks can be rewired so expert-parallel collectives overlap with
//! compute.

pub mod check;
pub mod error;
pub mod model;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
