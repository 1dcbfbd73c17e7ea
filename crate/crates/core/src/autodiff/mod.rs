//! Dense reverse-mode differentiation.
//!
//! Values are recorded on a [`Tape`] as the forward pass runs; [`Tape::backward`]
//! walks the record in reverse and returns [`Gradients`] for every
//! gradient-carrying leaf. A tape is built per training step and dropped after
//! the update, so nothing is retained between batches.
//!
//! Only bias-style row broadcasting is supported (`add`, `sub`, `mul_row` with a
//! `1 x C` right operand). Every other shape mismatch is an error.

mod matrix;
mod optim;
mod tape;

pub use matrix::{argmax, Matrix};
pub use optim::{adam_step, AdamConfig, AdamState, BoundParams, Params};
pub use tape::{softmax, softmax_in_place, Gradients, Tape, Tensor};
