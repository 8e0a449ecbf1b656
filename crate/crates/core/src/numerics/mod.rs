//! Dense matrix arithmetic, reverse-mode differentiation and gradient checks.

pub mod gradcheck;
pub mod matrix;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_entries, GradCheckReport, Objective, ParamSet};
pub use matrix::{cross_entropy_diag, l2_normalize_rows, matmul, softmax_rows, Axis, Matrix};
pub use tape::{GradTape, Gradients, Var};
