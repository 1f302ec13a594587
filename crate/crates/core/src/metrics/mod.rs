//! 3D shape similarity: voxel IoU, Chamfer distance and Earth Mover's
//! distance, with the preprocessing that makes them comparable across
//! methods.
//!
//! Point-cloud metrics run on surfaces: a grid is meshed at the iso value,
//! sampled uniformly by area and normalized so its bounding box is centered
//! at the origin with longest side 1.

mod cloud;
mod emd;
mod iou;
mod marching;
mod voxel;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;

pub use cloud::{chamfer, mean_nearest_distance, normalize, sample_surface, KdTree, PointCloud};
pub use emd::{emd, Assignment};
pub use iou::{
    best_threshold, iou, iou_with, prepare_iou, prepare_iou_traced, threshold_curve, IouTrace,
    POOL_FACTOR, POOL_TRIGGER,
};
pub use marching::marching_cubes;
pub use voxel::VoxelGrid;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("iso-surface is empty: every value lies on one side of the iso level")]
    EmptySurface,
    #[error("mesh has zero total area")]
    DegenerateMesh,
    #[error("point cloud has zero extent")]
    ZeroExtent,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point clouds differ in size: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("no voxel above the bounding-box threshold")]
    EmptyGrid,
    #[error("grid resolutions differ: {left:?} vs {right:?}")]
    ResolutionMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("no grid pairs given")]
    EmptyInput,
    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),
    #[error("invalid metric configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl MetricError {
    pub fn code(&self) -> &'static str {
        match self {
            MetricError::EmptySurface => "EmptySurface",
            MetricError::DegenerateMesh => "DegenerateMesh",
            MetricError::ZeroExtent => "ZeroExtent",
            MetricError::EmptyCloud => "EmptyCloud",
            MetricError::SizeMismatch { .. } => "SizeMismatch",
            MetricError::EmptyGrid => "EmptyGrid",
            MetricError::ResolutionMismatch { .. } => "ResolutionMismatch",
            MetricError::EmptyInput => "EmptyInput",
            MetricError::InvalidGrid(_) => "InvalidGrid",
            MetricError::InvalidConfig(_) => "InvalidConfig",
            MetricError::Parse(_) => "ParseError",
            MetricError::Geometry(_) => "GeometryError",
            MetricError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub iso_value: f64,
    pub n_samples: usize,
    pub iou_resolution: usize,
    pub iou_bbox_threshold: f64,
    pub threshold_min: f64,
    pub threshold_max: f64,
    pub threshold_step: f64,
    /// Ground-truth binarization level for IoU. `None` binarizes the ground
    /// truth at the same swept threshold as the prediction.
    pub gt_threshold: Option<f64>,
    pub emd_epsilon: f64,
    pub rng_seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            iso_value: 0.1,
            n_samples: 1024,
            iou_resolution: 32,
            iou_bbox_threshold: 0.1,
            threshold_min: 0.01,
            threshold_max: 0.50,
            threshold_step: 0.01,
            gt_threshold: None,
            emd_epsilon: 0.002,
            rng_seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        let bad = |m: String| Err(MetricError::InvalidConfig(m));
        if !(self.iso_value > 0.0 && self.iso_value < 1.0) {
            return bad(format!("iso_value {} outside (0, 1)", self.iso_value));
        }
        if self.n_samples < 1 {
            return bad("n_samples must be at least 1".into());
        }
        if self.iou_resolution < 1 {
            return bad("iou_resolution must be at least 1".into());
        }
        if !(self.threshold_step > 0.0 && self.threshold_min <= self.threshold_max) {
            return bad("threshold sweep needs step > 0 and min <= max".into());
        }
        if !(self.emd_epsilon > 0.0) {
            return bad("emd_epsilon must be positive".into());
        }
        Ok(())
    }

    /// Swept thresholds, ascending. Values are rounded to 1e-9 so that the
    /// default sweep yields exactly the decimals `0.01, 0.02, …, 0.50`.
    pub fn thresholds(&self) -> Vec<f64> {
        let count = ((self.threshold_max - self.threshold_min) / self.threshold_step + 1e-9).floor()
            as usize;
        (0..=count)
            .map(|k| ((self.threshold_min + k as f64 * self.threshold_step) * 1e9).round() / 1e9)
            .collect()
    }
}

/// Surface point cloud of a grid: pad with one empty layer so the surface
/// closes at the grid boundary, extract the iso-surface, sample
/// `n_samples` points with `rng_seed`, and normalize.
pub fn voxel_to_cloud(grid: &VoxelGrid, config: &MetricConfig) -> Result<PointCloud, MetricError> {
    config.validate()?;
    let mesh = marching_cubes(&grid.padded(1), config.iso_value)?;
    normalize(&sample_surface(&mesh, config.n_samples, config.rng_seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{block_grid, sphere_grid};

    #[test]
    fn default_config() {
        let c = MetricConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.iso_value, 0.1);
        assert_eq!(c.n_samples, 1024);
        assert_eq!(c.iou_resolution, 32);
        assert!(MetricConfig {
            iso_value: 1.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(MetricConfig { n_samples: 0, ..c }.validate().is_err());
    }

    #[test]
    fn cloud_postconditions_and_determinism() {
        let g = block_grid(12, [2, 3, 4], [10, 9, 8]);
        let c = MetricConfig::default();
        let a = voxel_to_cloud(&g, &c).unwrap();
        assert_eq!(a.len(), 1024);
        let (lo, hi) = a.bounds().unwrap();
        assert!(((hi - lo).max() - 1.0).abs() < 1e-9);
        assert!(((lo + hi) / 2.0).norm() < 1e-9);
        assert_eq!(a, voxel_to_cloud(&g, &c).unwrap());
    }

    #[test]
    fn grid_touching_the_border_still_meshes() {
        let g = VoxelGrid::from_fn([6, 6, 6], |_, _, _| 1.0);
        assert_eq!(
            voxel_to_cloud(&g, &MetricConfig::default()).unwrap().len(),
            1024
        );
    }

    #[test]
    fn sphere_cloud_matches_analytic_surface() {
        let (n, radius) = (24, 8.0);
        let g = sphere_grid(n, radius);
        let cfg = MetricConfig::default();
        let mesh = marching_cubes(&g.padded(1), cfg.iso_value).unwrap();
        let raw = sample_surface(&mesh, cfg.n_samples, cfg.rng_seed).unwrap();
        let cloud = voxel_to_cloud(&g, &cfg).unwrap();
        // Undo the normalization using the raw sample's bounding box.
        let (lo, hi) = raw.bounds().unwrap();
        let (center, extent) = ((lo + hi) / 2.0, (hi - lo).max());
        let c = (n as f64 - 1.0) / 2.0 + 1.0;
        for p in cloud.points() {
            let q = p * extent + center;
            let r = ((q.x - c).powi(2) + (q.y - c).powi(2) + (q.z - c).powi(2)).sqrt();
            assert!((r - radius).abs() < 1.5, "{r}");
        }
    }
}
