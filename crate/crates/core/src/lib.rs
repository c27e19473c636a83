//! Sparse-to-dense learning for 4D radar point clouds.
//!
//! The crate turns a sparse radar sweep into a denser, cleaner point set and
//! detects objects on it:
//!
//! 1. [`voxel`] encodes the raw cloud into voxels and maps voxel features back
//!    to every point.
//! 2. [`fpg`] (foreground point generator) classifies each point, drops
//!    background returns, votes an object centre per surviving point and
//!    spawns a virtual point there with KNN-interpolated features.
//! 3. [`pillars`] groups the dense cloud into BEV pillars, keeping the class
//!    logits as channels, encodes them and runs a per-cell detection head.
//! 4. [`lqe`] (logit-query encoder) gives each pillar an absorption radius
//!    derived from its class composition and fuses the features of outside
//!    points within that radius into the pillar feature.
//!
//! Everything trainable is a small perceptron stack from [`nn`] with a
//! hand-written backward pass. [`model`] wires the stages into one end-to-end
//! trainable network, [`synth`] generates labelled scenes and [`eval`] scores
//! the results.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fpg;
pub mod gradcheck;
pub mod io;
pub mod lqe;
pub mod model;
pub mod nn;
pub mod pillars;
pub mod spatial;
pub mod synth;
pub mod tensor;
pub mod types;
pub mod voxel;

pub use config::{crop_to_bounds, validate_config, PipelineConfig};
pub use error::{Error, Result};
pub use tensor::Matrix;
pub use types::{ClassId, ObjectBox, PointCloud, RadarPoint};
