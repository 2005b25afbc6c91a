//! Layer-local training engine for Forward-Forward style algorithms.
//!
//! Every trainable layer owns a loss, a [`graph::LocalGraph`] recording its
//! own forward computation, and an optimizer. Backward passes never cross
//! layer boundaries: a layer hands its successor a detached copy of its
//! output.
//!
//! The crate is `no_std` (with `alloc`) when built without the default
//! `std` feature; file formats, threads and the CLI live in the `cff` crate.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numeric;
pub mod optim;
pub mod real;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, LocalGraph, Var};
pub use real::Real;
pub use tensor::Tensor;
