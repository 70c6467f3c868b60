//! Layout-aware transformer encoder whose self-attention is biased by the
//! relative polar coordinates (distance and angle) between text-box centers.
//!
//! The crate is `no_std` and only needs `alloc`. It contains everything that is
//! pure computation: geometry and binning, a small reverse-mode tensor tape,
//! the encoder with its MLM / local-order / NER heads, masking, optimizer and
//! schedule, training loops, document encoding, synthetic corpora and entity
//! metrics. File formats, run manifests and the command-line driver live in
//! the `polar-layout` companion crate.

#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
