//! Camera pose and focal length recovery from 2D-3D keypoint correspondences.
//!
//! The pipeline is EPnP over a sweep of focal lengths, followed by
//! Levenberg-Marquardt refinement of all seven parameters
//! `(theta, phi, psi, x, y, z, f)` from several randomly disturbed starts.
//! Two robust wrappers cope with noisy human annotations: RANSAC over the
//! pooled annotator observations, and consensus over annotator subsets.
//!
//! Every solver is deterministic for a fixed [`SolverConfig::rng_seed`].
//! Parallel evaluation (rayon) never changes the result: candidates are
//! collected in a fixed order and reduced with the same tie-break.

mod epnp;
mod lma;
mod p3p;
mod robust;

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    compose, reprojection_error, GeometryError, ImageSize, KeypointSet2D, KeypointSet3D, Point2,
    Point3, RigidPose,
};

pub use epnp::epnp;
pub use lma::refine_lma;
pub use robust::{observation_distances, solve_ransac, solve_subset_consensus, AnnotationTriple};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("need at least 4 visible correspondences, got {visible}")]
    TooFewPoints { visible: usize },
    #[error("degenerate 3D configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no solution: {0}")]
    NoSolution(String),
    #[error("no consensus: best hypothesis has {support} supporting observations")]
    NoConsensus { support: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl SolveError {
    /// Stable machine-readable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            SolveError::TooFewPoints { .. } => "TooFewPoints",
            SolveError::DegenerateConfiguration(_) => "DegenerateConfiguration",
            SolveError::NoSolution(_) => "NoSolution",
            SolveError::NoConsensus { .. } => "NoConsensus",
            SolveError::InvalidConfig(_) => "InvalidConfig",
            SolveError::Geometry(_) => "GeometryError",
        }
    }
}

/// Standard deviations of the Gaussian disturbances applied to the restart
/// states of the LM refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceSigmas {
    /// Per Euler angle, in degrees.
    pub rotation_deg: f64,
    /// Per translation axis, as a fraction of `‖T‖`.
    pub translation_rel: f64,
    /// Fraction of the focal length.
    pub focal_rel: f64,
}

impl Default for DisturbanceSigmas {
    fn default() -> Self {
        Self {
            rotation_deg: 5.0,
            translation_rel: 0.05,
            focal_rel: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub focal_min: f64,
    pub focal_max: f64,
    pub focal_step: f64,
    pub n_restarts: usize,
    pub lma_max_iter: usize,
    /// Stop once an accepted step improves the objective by less than this
    /// relative amount.
    pub lma_tol: f64,
    pub disturbance_sigmas: DisturbanceSigmas,
    pub ransac_iters: usize,
    /// Inlier distance in pixels; `None` means 5% of the longer image side.
    pub ransac_inlier_px: Option<f64>,
    /// Early-exit confidence of the adaptive RANSAC iteration bound.
    pub ransac_confidence: f64,
    /// LM restarts used while scoring a single RANSAC hypothesis. The final
    /// refit on the consensus set always uses `n_restarts`.
    pub ransac_hypothesis_restarts: usize,
    pub rng_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            focal_min: 300.0,
            focal_max: 2000.0,
            focal_step: 10.0,
            n_restarts: 50,
            lma_max_iter: 200,
            lma_tol: 1e-10,
            disturbance_sigmas: DisturbanceSigmas::default(),
            ransac_iters: 200,
            ransac_inlier_px: None,
            ransac_confidence: 0.99,
            ransac_hypothesis_restarts: 1,
            rng_seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: &str| Err(SolveError::InvalidConfig(m.to_string()));
        if !(self.focal_min > 0.0 && self.focal_min <= self.focal_max) {
            return bad("focal_min must be positive and not exceed focal_max");
        }
        if !(self.focal_step > 0.0) {
            return bad("focal_step must be positive");
        }
        if self.n_restarts < 1 {
            return bad("n_restarts must be at least 1");
        }
        if !(0.0..1.0).contains(&self.ransac_confidence) {
            return bad("ransac_confidence must lie in [0, 1)");
        }
        Ok(())
    }

    /// Focal lengths visited by the sweep, ascending and inclusive of
    /// `focal_max` when it lies on the step grid.
    pub fn focal_values(&self) -> Vec<f64> {
        let count = ((self.focal_max - self.focal_min) / self.focal_step + 1e-9).floor() as usize;
        (0..=count)
            .map(|k| self.focal_min + k as f64 * self.focal_step)
            .collect()
    }

    pub fn inlier_threshold(&self, image: ImageSize) -> f64 {
        self.ransac_inlier_px.unwrap_or(0.05 * image.max_side())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Plain,
    Ransac,
    #[serde(alias = "subset")]
    SubsetConsensus,
}

impl std::str::FromStr for SolveMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(SolveMethod::Plain),
            "ransac" => Ok(SolveMethod::Ransac),
            "subset" | "subset_consensus" => Ok(SolveMethod::SubsetConsensus),
            other => Err(format!(
                "unknown method '{other}' (expected plain|ransac|subset)"
            )),
        }
    }
}

/// One 2D observation of a keypoint by a given annotator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub annotator: usize,
    pub keypoint: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSolution {
    pub pose: RigidPose,
    pub focal: f64,
    /// Reprojection error (sum of squared pixel distances) on the
    /// correspondences this solution was fitted to.
    pub error: f64,
    /// RANSAC consensus set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inliers: Option<Vec<Observation>>,
    /// Winning annotator subset for subset consensus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<usize>>,
    pub method: SolveMethod,
}

impl AlignmentSolution {
    pub fn projection(
        &self,
        image: ImageSize,
    ) -> Result<crate::geometry::ProjectionMatrix, GeometryError> {
        Ok(compose(&image.intrinsics(self.focal)?, &self.pose))
    }

    /// Reprojection error of this solution on the given correspondences.
    pub fn error_on(
        &self,
        kp3d: &KeypointSet3D,
        kp2d: &KeypointSet2D,
        image: ImageSize,
    ) -> Result<f64, GeometryError> {
        reprojection_error(&self.projection(image)?, kp3d, kp2d)
    }

    fn params(&self) -> [f64; 7] {
        let p = self.pose.to_array();
        [p[0], p[1], p[2], p[3], p[4], p[5], self.focal]
    }

    /// Total order used to pick among candidates: error, then focal, then the
    /// pose parameters lexicographically.
    pub(crate) fn selection_order(&self, other: &Self) -> Ordering {
        self.error
            .total_cmp(&other.error)
            .then(self.focal.total_cmp(&other.focal))
            .then_with(|| {
                let (a, b) = (self.params(), other.params());
                a.iter()
                    .zip(&b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    }
}

/// Picks the best candidate; earlier entries win exact ties.
pub(crate) fn select_best<I>(candidates: I) -> Option<AlignmentSolution>
where
    I: IntoIterator<Item = AlignmentSolution>,
{
    candidates.into_iter().fold(None, |best, c| match best {
        Some(b) if c.selection_order(&b) != Ordering::Less => Some(b),
        _ => Some(c),
    })
}

/// Visible correspondences as parallel arrays.
pub(crate) fn visible_pairs(
    kp3d: &KeypointSet3D,
    kp2d: &KeypointSet2D,
) -> Result<(Vec<Point3>, Vec<Point2>), SolveError> {
    if kp3d.len() != kp2d.len() {
        return Err(GeometryError::LengthMismatch {
            left: kp3d.len(),
            right: kp2d.len(),
        }
        .into());
    }
    Ok(kp2d
        .visible_indices()
        .into_iter()
        .map(|i| (kp3d.points()[i], kp2d.points()[i]))
        .unzip())
}

/// Runs EPnP at every focal length of the sweep and keeps the pose with the
/// lowest reprojection error (lowest focal on ties).
pub fn solve_epnp_focal_sweep(
    kp3d: &KeypointSet3D,
    kp2d: &KeypointSet2D,
    image: ImageSize,
    config: &SolverConfig,
) -> Result<AlignmentSolution, SolveError> {
    config.validate()?;
    let (world, pixels) = visible_pairs(kp3d, kp2d)?;
    if world.len() < 4 {
        return Err(SolveError::TooFewPoints {
            visible: world.len(),
        });
    }
    let frame = epnp::ControlFrame::new(&world)?;

    let candidates: Vec<Option<AlignmentSolution>> = config
        .focal_values()
        .into_par_iter()
        .map(|focal| {
            let intrinsics = image.intrinsics(focal).ok()?;
            let normalized: Vec<Point2> = pixels.iter().map(|p| intrinsics.normalize(p)).collect();
            let pose = frame.solve(&world, &normalized).ok()?;
            let error = reprojection_error(&compose(&intrinsics, &pose), kp3d, kp2d).ok()?;
            error.is_finite().then_some(AlignmentSolution {
                pose,
                focal,
                error,
                inliers: None,
                subset: None,
                method: SolveMethod::Plain,
            })
        })
        .collect();

    // Ascending focal order, so earlier entries win ties on error.
    candidates
        .into_iter()
        .flatten()
        .fold(None::<AlignmentSolution>, |best, c| match best {
            Some(b) if c.error >= b.error => Some(b),
            _ => Some(c),
        })
        .ok_or_else(|| SolveError::NoSolution("EPnP failed at every focal length".into()))
}

/// Focal sweep followed by LM refinement with random restarts.
pub fn solve_plain(
    kp3d: &KeypointSet3D,
    kp2d: &KeypointSet2D,
    image: ImageSize,
    config: &SolverConfig,
) -> Result<AlignmentSolution, SolveError> {
    let initial = solve_epnp_focal_sweep(kp3d, kp2d, image, config)?;
    refine_lma(&initial, kp3d, kp2d, image, config)
}

/// Dispatches to the requested solver. `Plain` runs on the per-keypoint
/// median of all available annotations.
pub fn solve(
    method: SolveMethod,
    kp3d: &KeypointSet3D,
    annotations: &AnnotationTriple,
    image: ImageSize,
    config: &SolverConfig,
) -> Result<AlignmentSolution, SolveError> {
    match method {
        SolveMethod::Plain => solve_plain(kp3d, &annotations.consensus_all(), image, config),
        SolveMethod::Ransac => solve_ransac(kp3d, annotations, image, config),
        SolveMethod::SubsetConsensus => solve_subset_consensus(kp3d, annotations, image, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sweep_covers_300_to_2000() {
        let f = SolverConfig::default().focal_values();
        assert_eq!(f.len(), 171);
        assert_eq!(f[0], 300.0);
        assert_eq!(*f.last().unwrap(), 2000.0);
        assert!(f.windows(2).all(|w| (w[1] - w[0] - 10.0).abs() < 1e-9));
    }

    #[test]
    fn degenerate_sweep_has_one_value() {
        let cfg = SolverConfig {
            focal_min: 750.0,
            focal_max: 750.0,
            ..Default::default()
        };
        assert_eq!(cfg.focal_values(), vec![750.0]);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            focal_min: 900.0,
            focal_max: 800.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            n_restarts: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("plain".parse::<SolveMethod>().unwrap(), SolveMethod::Plain);
        assert_eq!(
            "subset".parse::<SolveMethod>().unwrap(),
            SolveMethod::SubsetConsensus
        );
        assert!("lsq".parse::<SolveMethod>().is_err());
    }

    #[test]
    fn selection_prefers_error_then_focal() {
        let mk = |error, focal| AlignmentSolution {
            pose: RigidPose::default(),
            focal,
            error,
            inliers: None,
            subset: None,
            method: SolveMethod::Plain,
        };
        let best = select_best(vec![mk(2.0, 300.0), mk(1.0, 900.0), mk(1.0, 500.0)]).unwrap();
        assert_eq!(best.focal, 500.0);
    }
}
