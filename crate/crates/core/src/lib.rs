//! Two-stage object detection with hierarchical context embedding.
//!
//! The crate is organised bottom-up:
//!
//! * [`roi_ops`] holds the geometric and pooling kernels (IoU, NMS, bilinear
//!   sampling, RoIAlign, global pooling) together with their backward passes.
//! * [`nn`] provides the handful of trainable layers the detector needs,
//!   each with an explicit backward pass.
//! * [`context`] implements the image-level categorical embedding, the
//!   hierarchical contextual RoI feature and the two fusion rules.
//! * [`detector`] wires backbone, proposals, the shared detection head and the
//!   context modules into a trainable two-stage detector.
//! * [`synth`] generates the context-dependent synthetic dataset and reads or
//!   writes it in COCO layout.
//! * [`eval`] computes COCO-style AP and the five-way error breakdown.
//! * [`config`] parses run configurations and the ablation presets;
//!   [`run`] drives training epochs and evaluation passes over a dataset.
//! * [`gradcheck`] compares every backward pass with central differences.

pub mod config;
pub mod context;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod par;
pub mod roi_ops;
pub mod run;
pub mod synth;

pub use error::{HceError, Result};
pub use roi_ops::{Bbox, FeatureMap};
