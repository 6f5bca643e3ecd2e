//! Desk-scale laboratory for converting a trained mixture-of-experts
//! language model into a dynamic one with parameterless zero experts.

// `!(x > 0.0)`-style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod balancing;
pub mod distillation;
pub mod error;
pub mod flops;
pub mod injection;
pub mod model;
pub mod numerics;
pub mod seed;

pub use error::{Error, Result};
