//! Prompt-evolving continual learning at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: dense arrays, a reverse-mode tape and a finite-difference verifier.
//! - [`backbone`]: a frozen transformer encoder accepting key/value prefixes, plus the
//!   growing linear classifier.
//! - [`evolution`]: base-prompt pools and the transformation/alignment pipeline that
//!   evolves them into a unified per-task prompt.
//! - [`gate`]: the Gumbel-relaxed probabilistic layer-insertion gate.
//! - [`harness`]: synthetic class-incremental scenarios, training, inference, metrics
//!   and two baseline strategies.
//! - [`config`], [`snapshot`]: run configuration and on-disk formats.

pub mod backbone;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod evolution;
pub mod gate;
pub mod harness;
pub mod snapshot;

pub use diffcore::{Array, Precision, Tape, Var};
pub use error::{Error, Result};
