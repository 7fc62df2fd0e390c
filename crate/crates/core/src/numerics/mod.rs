//! Minimal reverse-mode tensor core.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, relative_error};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;
