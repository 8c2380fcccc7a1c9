//! Differentiable operations, implemented as methods on [`crate::Graph`].
//!
//! Every operation validates shapes, computes its output eagerly and records
//! a backward rule. Inputs that do not require gradients are skipped during
//! the reverse sweep.

mod conv;
mod elementwise;
pub(crate) mod linalg;
mod norm;
mod reduce;
pub(crate) mod shape;

pub use conv::{conv_out_size, deconv_out_size};
