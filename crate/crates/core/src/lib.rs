//! Unified triplet encoding of heterogeneous data and the triplet
//! transformer that learns from it.
//!
//! Any supported sample (table row, time-series window, image, spectrogram,
//! graph node neighbourhood, token sequence, point cloud) is decomposed into
//! a set of triplets `(num1, local topology, num2)` plus a global index.
//! Triplets are tokenized by one shared tokenizer, processed by a
//! bidirectional transformer with rotary positions, and trained by parallel
//! masked reconstruction across modalities.
//!
//! The crate is `no_std` and needs only `alloc`; file formats and the CLI
//! live in the companion `pangaea` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod eval;
pub mod modality;
pub mod pretrain;
pub mod scaling;
pub mod tensor;
pub mod tokenizer;
pub mod transformer;
pub mod triplet;

pub use error::{Error, Result};
pub use modality::ModalityKind;
