//! Gated-attention multi-instance classification.
//!
//! A small reverse-mode tensor tape drives a two-branch network: a global
//! branch whose feature maps feed a gated attention module, and an instance
//! branch that re-reads the most attended regions of the full-resolution
//! image through a shared backbone. Everything here is `no_std` + `alloc`;
//! file formats and the command line live in the `gatn` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod localizer;
pub mod model;
pub mod reference;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor4, Var};
