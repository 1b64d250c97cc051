//! Rehearsal-based meta continual learning with compressed latent replay.
//!
//! The pipeline has two phases. Offline, [`meta::meta_train`] runs
//! inner/outer-loop optimization over a stream of classes to produce a weight
//! initialization that adapts quickly from few samples, and collects the
//! latent activations needed to fit a product-quantization codebook. At
//! deployment, the feature extractor is frozen (optionally quantized to
//! int8), and [`meta::continual_learn`] learns unseen classes one at a time:
//! fast inner-loop updates on the classifier, then outer-loop replay over a
//! buffer of compressed latent activations to keep earlier classes alive.
//!
//! Rehearsal samples go through a two-stage codec: a lossless sparse bitmap
//! that drops the zero activations ReLU produces in bulk, then product
//! quantization of the surviving non-zero vector. Byte-exact accounting for
//! the buffer, model, and optimizer state lives in [`memory`].

pub mod compress;
pub mod data;
pub mod error;
pub mod io;
pub mod memory;
pub mod meta;
pub mod model;
pub mod replay;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
