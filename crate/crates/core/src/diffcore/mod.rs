//! Dense arrays, a reverse-mode tape over them, and a finite-difference
//! gradient checker.

mod array;
pub mod codec;
mod gradcheck;
mod scalar;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use scalar::Scalar;
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, CustomOp, Grads, Tape, Var};
