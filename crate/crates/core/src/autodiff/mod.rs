//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Storage is 32-bit (`Tensor`, `Parameter`), while every value recorded on
//! the [`Tape`] is held and combined in 64-bit, so gradients agree with
//! central finite differences to well below the 1e-3 tolerance the tests
//! demand and forward evaluation is bit-deterministic.

mod check;
mod param;
mod tape;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use param::{adaptive_step, AdamState, Parameter};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
