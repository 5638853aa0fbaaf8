//! Training orchestration, file formats, experiment sweeps, and plotting for
//! the semi-supervised multi-instance keypoint estimator.

pub mod checkpoint;
pub mod error;
pub mod formats;
pub mod runner;
pub mod sweep;

pub use error::{AppError, Result};
