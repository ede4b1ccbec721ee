//! SplitMixer: small convolutional mixer networks with split channel mixing.
//!
//! The crate bundles a 4-D tensor type with a reverse-mode tape, CPU kernels for
//! the layers these networks need, model construction, an analytic cost model,
//! a CIFAR-style data pipeline, AdamW training and numerical verification tools.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod kernels;
pub mod mixing;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub mod verify;
