//! Minimal differentiable array substrate: dense arrays, a recording tape
//! with reverse-mode gradients, small-matrix singular values, and a
//! finite-difference gradient verifier.

mod array;
mod gradcheck;
mod linalg;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_with, GradCheckHooks, GradCheckReport, NamedParam};
pub use linalg::{nuclear_norm, singular_values};
pub use tape::{Gradients, Precision, Tape, Var};
