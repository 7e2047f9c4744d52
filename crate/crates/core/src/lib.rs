//! Part-aware metric learning with an exemplar memory bank.
//!
//! The crate carries its own small reverse-mode autodiff ([`tensor`]), a toy
//! feature extractor, stripe partitioning, the memory bank and losses, an SGD
//! trainer, and a retrieval evaluator with an independent oracle.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod memory;
pub mod model;
pub mod oracle;
pub mod parts;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
