//! Robust alignment from several (up to three) independent annotations.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    refine_lma, select_best, solve_epnp_focal_sweep, solve_plain, AlignmentSolution, Observation,
    SolveError, SolveMethod, SolverConfig,
};
use crate::geometry::{
    compose, project, GeometryError, ImageSize, KeypointSet2D, KeypointSet3D, Point2, Point3,
};

/// Keypoint annotations of one image by one to three annotators, all with
/// the same keypoint ordering. Serialized as an array of sets; a lone set
/// without the array is also accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OneOrMany", into = "Vec<KeypointSet2D>")]
pub struct AnnotationTriple {
    sets: Vec<KeypointSet2D>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    Many(Vec<KeypointSet2D>),
    One(KeypointSet2D),
}

impl TryFrom<OneOrMany> for AnnotationTriple {
    type Error = GeometryError;

    fn try_from(raw: OneOrMany) -> Result<Self, Self::Error> {
        match raw {
            OneOrMany::Many(sets) => Self::new(sets),
            OneOrMany::One(set) => Ok(Self::single(set)),
        }
    }
}

impl From<AnnotationTriple> for Vec<KeypointSet2D> {
    fn from(t: AnnotationTriple) -> Self {
        t.sets
    }
}

impl AnnotationTriple {
    pub const MAX_ANNOTATORS: usize = 3;

    pub fn new(sets: Vec<KeypointSet2D>) -> Result<Self, GeometryError> {
        if sets.is_empty() || sets.len() > Self::MAX_ANNOTATORS {
            return Err(GeometryError::InvalidKeypoints(format!(
                "expected 1 to 3 annotation sets, got {}",
                sets.len()
            )));
        }
        let n = sets[0].len();
        if let Some(bad) = sets.iter().find(|s| s.len() != n) {
            return Err(GeometryError::LengthMismatch {
                left: n,
                right: bad.len(),
            });
        }
        Ok(Self { sets })
    }

    pub fn single(set: KeypointSet2D) -> Self {
        Self { sets: vec![set] }
    }

    pub fn sets(&self) -> &[KeypointSet2D] {
        &self.sets
    }

    pub fn n_annotators(&self) -> usize {
        self.sets.len()
    }

    pub fn n_keypoints(&self) -> usize {
        self.sets[0].len()
    }

    /// Nonempty annotator subsets in bitmask order (`{0}, {1}, {0,1}, {2}, …`).
    pub fn subsets(&self) -> Vec<Vec<usize>> {
        let k = self.sets.len();
        (1u32..(1 << k))
            .map(|mask| (0..k).filter(|&a| mask & (1 << a) != 0).collect())
            .collect()
    }

    /// Per-keypoint consensus over `members`: a keypoint is visible when a
    /// strict majority of the members see it, and its coordinates are the
    /// coordinate-wise median over the members that see it.
    pub fn consensus(&self, members: &[usize]) -> KeypointSet2D {
        let n = self.n_keypoints();
        let mut points = Vec::with_capacity(n);
        let mut visible = Vec::with_capacity(n);
        for i in 0..n {
            let seen: Vec<Point2> = members
                .iter()
                .filter(|&&a| self.sets[a].is_visible(i))
                .map(|&a| self.sets[a].points()[i])
                .collect();
            visible.push(2 * seen.len() > members.len());
            let source: Vec<Point2> = if seen.is_empty() {
                members.iter().map(|&a| self.sets[a].points()[i]).collect()
            } else {
                seen
            };
            points.push(Point2::new(
                median(source.iter().map(|p| p.x).collect()),
                median(source.iter().map(|p| p.y).collect()),
            ));
        }
        KeypointSet2D::new(points, visible).expect("consensus of valid sets is valid")
    }

    pub fn consensus_all(&self) -> KeypointSet2D {
        self.consensus(&(0..self.sets.len()).collect::<Vec<_>>())
    }

    /// Every visible (annotator, keypoint) observation, annotator-major.
    pub fn observations(&self) -> Vec<(Observation, Point2)> {
        self.sets
            .iter()
            .enumerate()
            .flat_map(|(a, set)| {
                set.visible_indices().into_iter().map(move |i| {
                    (
                        Observation {
                            annotator: a,
                            keypoint: i,
                        },
                        set.points()[i],
                    )
                })
            })
            .collect()
    }
}

/// Median; mean of the two middle values for even counts.
pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Flattens observations into an all-visible correspondence problem, one
/// entry per observation (3D keypoints repeat across annotators).
fn pooled_problem(
    kp3d: &KeypointSet3D,
    obs: &[(Observation, Point2)],
) -> Result<(KeypointSet3D, KeypointSet2D), GeometryError> {
    let world: Vec<Point3> = obs.iter().map(|(o, _)| kp3d.points()[o.keypoint]).collect();
    let pixels: Vec<Point2> = obs.iter().map(|(_, p)| *p).collect();
    Ok((
        KeypointSet3D::new(world)?,
        KeypointSet2D::all_visible(pixels)?,
    ))
}

fn check_lengths(kp3d: &KeypointSet3D, annotations: &AnnotationTriple) -> Result<(), SolveError> {
    if kp3d.len() != annotations.n_keypoints() {
        return Err(GeometryError::LengthMismatch {
            left: kp3d.len(),
            right: annotations.n_keypoints(),
        }
        .into());
    }
    Ok(())
}

struct Hypothesis {
    inliers: Vec<usize>,
    support: usize,
    score: f64,
}

/// RANSAC over the pooled (keypoint, annotator) observations.
///
/// Each hypothesis samples four distinct keypoints, one random annotator's
/// observation for each, and fits them with the focal sweep plus LM. An
/// observation is an inlier when it reprojects within the inlier threshold.
/// The iteration count adapts to the best inlier ratio found so far (capped
/// by `ransac_iters`). The winning consensus set is refitted with the full
/// pipeline and returned in [`AlignmentSolution::inliers`].
///
/// A sample always fits itself, so support is counted over observations
/// outside the minimal sample; fewer than four supporting observations is
/// reported as [`SolveError::NoConsensus`].
pub fn solve_ransac(
    kp3d: &KeypointSet3D,
    annotations: &AnnotationTriple,
    image: ImageSize,
    config: &SolverConfig,
) -> Result<AlignmentSolution, SolveError> {
    config.validate()?;
    check_lengths(kp3d, annotations)?;
    let obs = annotations.observations();
    // Observation indices per keypoint.
    let mut by_keypoint: Vec<Vec<usize>> = vec![Vec::new(); kp3d.len()];
    for (idx, (o, _)) in obs.iter().enumerate() {
        by_keypoint[o.keypoint].push(idx);
    }
    let candidates: Vec<usize> = (0..kp3d.len())
        .filter(|&i| !by_keypoint[i].is_empty())
        .collect();
    if candidates.len() < 4 {
        return Err(SolveError::TooFewPoints {
            visible: candidates.len(),
        });
    }

    let threshold = config.inlier_threshold(image);
    let threshold_sq = threshold * threshold;
    let hypothesis_config = SolverConfig {
        n_restarts: config.ransac_hypothesis_restarts.max(1),
        ..config.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut best: Option<Hypothesis> = None;
    let mut max_iters = config.ransac_iters;
    let mut iter = 0;
    while iter < max_iters {
        iter += 1;
        let chosen = sample(&mut rng, candidates.len(), 4);
        let sample_idx: Vec<usize> = chosen
            .iter()
            .map(|c| {
                let pool = &by_keypoint[candidates[c]];
                pool[rng.random_range(0..pool.len())]
            })
            .collect();
        let sample_obs: Vec<(Observation, Point2)> = sample_idx.iter().map(|&i| obs[i]).collect();
        let Ok((s3, s2)) = pooled_problem(kp3d, &sample_obs) else {
            continue;
        };
        let Ok(model) = solve_epnp_focal_sweep(&s3, &s2, image, &hypothesis_config)
            .and_then(|init| refine_lma(&init, &s3, &s2, image, &hypothesis_config))
        else {
            continue;
        };
        let Ok(p) = model.projection(image) else {
            continue;
        };
        let mut inliers = Vec::new();
        let mut score = 0.0;
        for (idx, (o, px)) in obs.iter().enumerate() {
            let Ok(uv) = project(&p, &kp3d.points()[o.keypoint]) else {
                continue;
            };
            // Points behind the camera never count as support.
            if p.apply(&kp3d.points()[o.keypoint]).z <= 0.0 {
                continue;
            }
            let d2 = (uv - px).norm_squared();
            if d2 < threshold_sq {
                inliers.push(idx);
                score += d2;
            }
        }
        let support = inliers.iter().filter(|i| !sample_idx.contains(i)).count();
        let better = match &best {
            None => true,
            Some(b) => {
                inliers.len() > b.inliers.len()
                    || (inliers.len() == b.inliers.len() && score < b.score)
            }
        };
        if better {
            let ratio = inliers.len() as f64 / obs.len() as f64;
            max_iters = max_iters.min(adaptive_iterations(ratio, config.ransac_confidence));
            best = Some(Hypothesis {
                inliers,
                support,
                score,
            });
        }
    }

    let best = best.ok_or(SolveError::NoConsensus { support: 0 })?;
    if best.support < 4 {
        return Err(SolveError::NoConsensus {
            support: best.support,
        });
    }
    let inlier_obs: Vec<(Observation, Point2)> = best.inliers.iter().map(|&i| obs[i]).collect();
    let (p3, p2) = pooled_problem(kp3d, &inlier_obs)?;
    let fit = solve_plain(&p3, &p2, image, config)?;
    Ok(AlignmentSolution {
        inliers: Some(inlier_obs.iter().map(|(o, _)| *o).collect()),
        method: SolveMethod::Ransac,
        ..fit
    })
}

/// Iterations needed to draw one all-inlier 4-sample with the given
/// confidence when a fraction `ratio` of observations are inliers.
fn adaptive_iterations(ratio: f64, confidence: f64) -> usize {
    let p_good = ratio.powi(4);
    if p_good >= 1.0 - 1e-12 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Solves on the median consensus of every nonempty annotator subset and
/// keeps the result with the lowest reprojection error, each error being
/// measured against that subset's own consensus keypoints.
pub fn solve_subset_consensus(
    kp3d: &KeypointSet3D,
    annotations: &AnnotationTriple,
    image: ImageSize,
    config: &SolverConfig,
) -> Result<AlignmentSolution, SolveError> {
    config.validate()?;
    check_lengths(kp3d, annotations)?;
    let results: Vec<Result<AlignmentSolution, SolveError>> = annotations
        .subsets()
        .into_par_iter()
        .map(|members| {
            let kp2d = annotations.consensus(&members);
            solve_plain(kp3d, &kp2d, image, config).map(|s| AlignmentSolution {
                subset: Some(members),
                method: SolveMethod::SubsetConsensus,
                ..s
            })
        })
        .collect();
    let reasons: Vec<String> = results
        .iter()
        .filter_map(|r| r.as_ref().err().map(|e| e.to_string()))
        .collect();
    select_best(results.into_iter().flatten()).ok_or_else(|| {
        SolveError::NoSolution(format!(
            "every annotator subset failed: {}",
            reasons.join("; ")
        ))
    })
}

/// Reprojection distance of each observation under `solution`.
pub fn observation_distances(
    solution: &AlignmentSolution,
    kp3d: &KeypointSet3D,
    annotations: &AnnotationTriple,
    image: ImageSize,
) -> Result<Vec<(Observation, f64)>, GeometryError> {
    let p = compose(&image.intrinsics(solution.focal)?, &solution.pose);
    annotations
        .observations()
        .into_iter()
        .map(|(o, px)| Ok((o, (project(&p, &kp3d.points()[o.keypoint])? - px).norm())))
        .collect()
}

impl AlignmentSolution {
    /// Recomputes [`AlignmentSolution::error`] from the annotations: against
    /// the median of all annotators (plain), of the winning subset (subset
    /// consensus), or over the consensus observations (RANSAC).
    pub fn fitted_error(
        &self,
        kp3d: &KeypointSet3D,
        annotations: &AnnotationTriple,
        image: ImageSize,
    ) -> Result<f64, GeometryError> {
        match (self.method, &self.subset, &self.inliers) {
            (SolveMethod::SubsetConsensus, Some(members), _) => {
                self.error_on(kp3d, &annotations.consensus(members), image)
            }
            (SolveMethod::Ransac, _, Some(inliers)) => {
                let keep: std::collections::HashSet<&Observation> = inliers.iter().collect();
                Ok(observation_distances(self, kp3d, annotations, image)?
                    .into_iter()
                    .filter(|(o, _)| keep.contains(o))
                    .map(|(_, d)| d * d)
                    .sum())
            }
            _ => self.error_on(kp3d, &annotations.consensus_all(), image),
        }
    }
}
