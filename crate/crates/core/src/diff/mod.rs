//! Dense reverse-mode differentiation over `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every evaluation: inputs are registered as
//! leaves (differentiable) or constants, each primitive appends a node
//! holding its value, and [`Tape::backward`] walks the nodes in reverse to
//! fill leaf gradients. Kinks (relu, abs) use subgradient 0.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    gradient_check, gradient_check_coords, gradient_check_sampled, relative_error, GradCheckReport,
    WorstCoordinate,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
