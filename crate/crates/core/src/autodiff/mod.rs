//! Dense tensors, hand-written layer gradients, a parameter store, and a
//! central-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, max_relative_error, Objective};
pub use layers::*;
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
