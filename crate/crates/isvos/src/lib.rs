//! Instance-augmented memory-matching video object segmentation, desk scale.
//!
//! The crate is organized around a minimal tensor engine with reverse-mode
//! differentiation ([`tensor`]), a pinned-FIFO spatial-temporal memory
//! ([`membank`]), the two model branches ([`instance`], [`vos`]), metrics,
//! synthetic data, and an end-to-end pipeline with a thin CLI.

pub mod config;
pub mod error;
pub mod instance;
pub mod layers;
pub mod membank;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod synth;
pub mod vos;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Param, Tape, Tensor, TensorId};
