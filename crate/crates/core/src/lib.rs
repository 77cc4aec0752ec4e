//! Structured filter pruning for a Siamese tracking network, with the small
//! CPU inference engine needed to calibrate, verify and benchmark the
//! compressed model end to end.
//!
//! The pipeline: build or load a model ([`model`]), run a calibration batch
//! to estimate per-filter feature-map ranks ([`rank`]), derive a keep-plan
//! from per-layer ratios, apply one-shot weight surgery ([`pruner`]), and
//! check the result with the tracking pipeline and metrics ([`tracker`]).
//! Convolution and correlation kernel variants live behind name-registered
//! traits in [`kernels`] and can be selected at runtime.

pub mod engine;
pub mod error;
pub mod kernels;
pub mod model;
pub mod pruner;
pub mod rank;
pub mod tensor;
pub mod tracker;

pub use error::{Error, Result};
