//! Dense matrices and the reverse-mode tape used by every trainable part of
//! the lab.

mod check;
mod matrix;
mod tape;

pub use check::{grad_check, GRAD_CHECK_FLOOR};
pub use matrix::{dot, l2_normalize, logsumexp, matmul_sequential, sigmoid, Matrix};
pub use tape::{Grads, Tape, Var};

pub(crate) use matrix::matmul_nn;
