//! Weakly supervised point cloud segmentation with camera guidance.
//!
//! The crate covers the whole pipeline on synthetic LiDAR + camera scenes:
//!
//! - [`synth`]: deterministic scene generation and rendering,
//! - [`geometry`]: cameras, projection and the camera-visible subset,
//! - [`activelabel`]: pillar RANSAC ground detection, HDBSCAN clustering and
//!   cluster-level annotation into sparse, propagated and negative labels,
//! - [`superpixel`]: SEEDS over-segmentation and superpixel/point matching,
//! - [`assoc`]: 3D -> 2D -> 3D association (walker and visit losses),
//! - [`rectify`]: pseudo-label estimation with adaptive thresholds and a
//!   prototype filter, plus baseline filters,
//! - [`trainer`]: the dual-branch classifier, segmentation losses and the EM loop,
//! - [`metrics`]: confusion matrices, IoU and clustering agreement.

pub mod activelabel;
pub mod assoc;
pub mod container;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod rectify;
pub mod superpixel;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
