//! Semi-supervised multi-instance keypoint estimation at desk scale.
//!
//! The crate implements the full training-side math of a three-branch
//! keypoint detector: a heatmap branch for keypoints, a heatmap branch for
//! pseudo bounding boxes, and a vector-field branch regressing per-cell
//! offsets to the nearest keypoint. Thresholding the box branch and reading
//! the vector field yields pseudo keypoints with confidences, which feed
//! score-weighted focal losses on both labeled and unlabeled frames.
//!
//! Modules:
//!
//! - [`engine`]: reverse-mode differentiable dense-array engine.
//! - [`targets`]: supervision tensors built from keypoint annotations.
//! - [`fusion`]: pseudo-keypoint extraction and instance decoding.
//! - [`losses`]: focal losses, branch losses, and the training objectives.
//! - [`model`]: the convolutional backbone and the three heads.
//! - [`eval`]: object keypoint similarity and COCO-style average precision.
//! - [`synth`]: deterministic synthetic multi-instance scene generation.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, training
//! orchestration, and the CLI live in the companion `semimultipose` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod engine;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod synth;
pub mod targets;

pub use error::{Error, Result};
