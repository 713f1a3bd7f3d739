//! Sparse local features: a small convolutional backbone, a keypoint
//! detection head, and a cross-layer deformable description head with a
//! naive reference path and a fused, blocked path.

pub mod backbone;
pub mod cli;
pub mod clidd;
pub mod config;
pub mod detect;
pub mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod matcher;
pub mod pipeline;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
