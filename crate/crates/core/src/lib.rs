//! Deterministic engine for comparing end-to-end and cascade (layer-wise)
//! training of small convolutional networks by how well their intermediate
//! features localise objects.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, image IO and the
//! experiment driver live in the `layerloc` companion crate.
//!
//! Module map:
//! - [`tensor`], [`numerics`]: rank-4 tensors, layer kernels with analytic
//!   backward passes, SGD, and a finite-difference gradient oracle.
//! - [`network`]: declarative layer graphs with tap points after every conv.
//! - [`training`]: end-to-end training, cascade training, per-tap probes.
//! - [`explain`]: saliency, Grad-CAM, LIME and Gaussian post-smoothing.
//! - [`metrics`]: percentile binarisation, IOU, localisation accuracy,
//!   granulometry.
//! - [`detect`]: a YOLO-v1 style grid head on frozen features plus
//!   NMS and mAP evaluation.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod detect;
mod error;
pub mod explain;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Shape4, Tensor4};
