//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a scalar sweeps the record in reverse and returns a
//! [`GradMap`] with the gradient of every differentiable leaf, which may be
//! network parameters (training) or the input image (adversarial attacks).
//!
//! There is no broadcasting: elementwise operations require equal shapes.

pub mod grad_check;
mod ops;
pub mod random_net;
mod sgd;
mod tape;

pub use grad_check::{grad_check, CheckReport, LossBuilder, Precision};
pub use ops::{Op, OpKind, LOG_FLOOR};
pub use sgd::Sgd;
pub use tape::{GradMap, Tape, Var};
