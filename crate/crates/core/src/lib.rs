//! Cross-domain instance retrieval with mid-layer feature fusion.
//!
//! The crate builds small convolutional backbones on a reverse-mode
//! autodiff tape, exposes intermediate activations as "taps", fuses
//! pooled tap features with the final embedding into one descriptor, and
//! trains that descriptor either with a triplet ranking loss (pose-aligned
//! matching) or an identity classification loss (pose-varying matching).
//! A synthetic two-domain benchmark, retrieval metrics, and experiment
//! orchestration round out the pipeline.

pub mod backbone;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod loss;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, ValueId};
