//! Differential-integral (DINT) attention and a small decoder-only language
//! model built around it, together with the synthetic tasks, training loop
//! and attention diagnostics used to compare it against DIFF and vanilla
//! attention.

pub mod error;
pub mod gradcheck;
pub mod invariants;
pub mod graph;
pub mod model;
pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod nn;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Mask, OpKind, Var};
pub use tensor::{Scalar, Tensor};
