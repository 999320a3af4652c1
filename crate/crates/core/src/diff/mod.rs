//! Minimal dense reverse-mode differentiation.
//!
//! Graphs are recorded on a [`Tape`] as operations execute (define-by-run) and
//! replayed backwards exactly once. Everything is `f64`; shapes never
//! broadcast except for per-channel bias terms.

mod adam;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
