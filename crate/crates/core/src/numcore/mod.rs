//! Reverse-mode differentiable arrays, Adam, and gradient checking.

mod adam;
mod array;
mod gradcheck;
mod suite;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::Array;
pub use gradcheck::{grad_check, grad_check_params, grad_check_with_step, GradCheckReport, DEFAULT_STEP};
pub use suite::primitive_suite;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
