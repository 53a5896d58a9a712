//! Relation-driven collaborative learning for lesion segmentation.
//!
//! A dual-encoder / shared-decoder U-Net is trained on a small labeled
//! target-lesion stream together with an auxiliary lesion stream. Channel-wise
//! Gram relation matrices of the encoder bottlenecks tie the two encoders
//! together: the general encoder is pulled towards producing the same relation
//! structure for both streams, while the target encoder is pushed away from the
//! general encoder on target inputs.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: tensors and layers with hand-written backward passes, relation
//! matrices, losses, the training step with its per-subnetwork gradient
//! routing, evaluation metrics and a synthetic two-domain phantom generator.
//! File formats, the run directory and the command line live in the
//! `relcollab` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod relation;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{Grid, Image, Mask};
pub use tensor::Tensor;
