//! Keypoint-based 2D-3D pose alignment and 3D shape similarity metrics.
//!
//! - [`bench`]: evaluation harness and agreement statistics.
//! - [`dataset`]: annotation records, OBJ meshes and dataset directories.
//! - [`geometry`]: camera model, rigid poses, projection and meshes.
//! - [`pose`]: focal-length and pose recovery from keypoints, including the
//!   robust variants for several annotators.
//! - [`metrics`]: voxel IoU, Chamfer and Earth Mover's distance.
//! - [`silhouette`]: mask rendering of posed meshes and mask IoU.
//! - [`synth`]: seeded synthetic scenes and shapes.

// `!(x > 0.0)` checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dataset;
pub mod geometry;
pub mod metrics;
pub mod pose;
pub mod silhouette;
pub mod synth;
