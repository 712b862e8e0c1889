//! Moving-object segmentation for sequences of LiDAR scans.
//!
//! Past scans are aligned into the current frame and quantized into 4D
//! voxels. A small sparse-convolution hourglass extracts motion features, an
//! instance branch detects objects on a bird's-eye-view heatmap, and a fusion
//! decoder combines both into per-point labels, which are then refined using
//! the detected instances and their recent history.

pub mod config;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod instances;
pub mod losses;
pub mod network;
pub mod real;
pub mod refinement;
pub mod sparse;

pub use error::{Error, Result};
pub use real::Real;
