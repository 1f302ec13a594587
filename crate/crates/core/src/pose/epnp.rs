//! EPnP: pose from n ≥ 4 correspondences through virtual control points.
//!
//! World points are written as barycentric combinations of four control
//! points (centroid plus the three principal directions). Each image point
//! contributes two linear constraints on the camera-frame control points,
//! so those lie in the near-null space of a `12 × 12` matrix `MᵀM`. The
//! combination of the `N = 1, 2, 3` smallest eigenvectors is fixed by
//! requiring inter-control-point distances to match the world, polished by
//! Gauss-Newton, and the best case (lowest reprojection error) is aligned
//! rigidly to the world points.
//!
//! Planar point sets have a rank-2 covariance; they use three control points
//! spanning the plane instead. With exactly four points the exact
//! three-point solutions are considered as well.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};

use super::{p3p, visible_pairs, SolveError};
use crate::geometry::{CameraIntrinsics, KeypointSet2D, KeypointSet3D, Point2, Point3, RigidPose};

/// Covariance eigenvalue ratio below which the cloud counts as collinear.
const COLLINEAR_RATIO: f64 = 1e-10;
/// Ratio of smallest to largest eigenvalue below which it counts as planar.
const PLANAR_RATIO: f64 = 1e-8;
const BETA_GN_ITERS: usize = 20;

/// Control points and barycentric coordinates of the world points.
#[derive(Debug, Clone)]
pub(crate) struct ControlFrame {
    controls: Vec<Point3>,
    alphas: Vec<Vec<f64>>,
}

impl ControlFrame {
    pub(crate) fn new(world: &[Point3]) -> Result<Self, SolveError> {
        let n = world.len() as f64;
        let centroid = world.iter().sum::<Point3>() / n;
        let cov = world
            .iter()
            .map(|p| (p - centroid) * (p - centroid).transpose())
            .sum::<Matrix3<f64>>()
            / n;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        if values[0] <= 0.0 || values[1] <= COLLINEAR_RATIO * values[0] {
            return Err(SolveError::DegenerateConfiguration(
                "3D keypoints are collinear or coincident".into(),
            ));
        }
        let axes = if values[2] <= PLANAR_RATIO * values[0] {
            2
        } else {
            3
        };

        let mut controls = vec![centroid];
        let mut scaled_axes = Vec::with_capacity(axes);
        for k in 0..axes {
            let axis = eig.eigenvectors.column(order[k]).into_owned();
            let sigma = values[k].sqrt();
            controls.push(centroid + axis * sigma);
            scaled_axes.push(axis / sigma);
        }
        let alphas = world
            .iter()
            .map(|p| {
                let d = p - centroid;
                let coeffs: Vec<f64> = scaled_axes.iter().map(|a| a.dot(&d)).collect();
                let mut row = vec![1.0 - coeffs.iter().sum::<f64>()];
                row.extend(coeffs);
                row
            })
            .collect();
        Ok(Self { controls, alphas })
    }

    fn n_controls(&self) -> usize {
        self.controls.len()
    }

    /// Pose from normalized image coordinates (`K⁻¹·pixel`) of the same
    /// points the frame was built from.
    pub(crate) fn solve(
        &self,
        world: &[Point3],
        image: &[Point2],
    ) -> Result<RigidPose, SolveError> {
        let nc = self.n_controls();
        let dim = 3 * nc;
        let mut mtm = DMatrix::<f64>::zeros(dim, dim);
        let mut row_u = DVector::<f64>::zeros(dim);
        let mut row_v = DVector::<f64>::zeros(dim);
        for (alpha, uv) in self.alphas.iter().zip(image) {
            for j in 0..nc {
                row_u[3 * j] = alpha[j];
                row_u[3 * j + 1] = 0.0;
                row_u[3 * j + 2] = -uv.x * alpha[j];
                row_v[3 * j] = 0.0;
                row_v[3 * j + 1] = alpha[j];
                row_v[3 * j + 2] = -uv.y * alpha[j];
            }
            mtm.ger(1.0, &row_u, &row_u, 1.0);
            mtm.ger(1.0, &row_v, &row_v, 1.0);
        }
        let eig = SymmetricEigen::new(mtm);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        // Kernel vectors split into per-control-point 3-vectors.
        let n_kernel = nc.min(4);
        let kernels: Vec<Vec<Point3>> = order[..n_kernel]
            .iter()
            .map(|&c| {
                let v = eig.eigenvectors.column(c);
                (0..nc)
                    .map(|j| Point3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]))
                    .collect()
            })
            .collect();

        let pairs: Vec<(usize, usize)> = (0..nc)
            .flat_map(|a| (a + 1..nc).map(move |b| (a, b)))
            .collect();
        let rho: Vec<f64> = pairs
            .iter()
            .map(|&(a, b)| (self.controls[a] - self.controls[b]).norm_squared())
            .collect();
        // dots[p][k][l] = dv_k · dv_l for control pair p.
        let dots: Vec<Vec<Vec<f64>>> = pairs
            .iter()
            .map(|&(a, b)| {
                let dv: Vec<Point3> = kernels.iter().map(|k| k[a] - k[b]).collect();
                dv.iter()
                    .map(|x| dv.iter().map(|y| x.dot(y)).collect())
                    .collect()
            })
            .collect();

        let mut best: Option<(f64, RigidPose)> = None;
        let max_case = if nc == 4 { 3 } else { 2 };
        let seeds = (1..=max_case).filter_map(|case| initial_betas(case, n_kernel, &dots, &rho));
        for mut betas in seeds {
            polish_betas(&mut betas, &dots, &rho);
            let Some((pose, err)) = self.pose_from_betas(&betas, &kernels, world, image) else {
                continue;
            };
            if best.as_ref().is_none_or(|(e, _)| err < *e) {
                best = Some((err, pose));
            }
        }
        // With four points the kernel is four-dimensional and the linearized
        // cases above are poor; the exact three-point solutions, checked
        // against the fourth point, are added as candidates.
        if world.len() == 4 {
            for (r, t) in p3p::solve_minimal(world, image) {
                let err = normalized_error(&r, &t, world, image);
                if err.is_finite() && best.as_ref().is_none_or(|(e, _)| err < *e) {
                    best = Some((err, RigidPose::from_rotation_translation(&r, &t)));
                }
            }
        }
        best.map(|(_, pose)| pose).ok_or_else(|| {
            SolveError::NoSolution("EPnP found no valid control point solution".into())
        })
    }

    fn pose_from_betas(
        &self,
        betas: &[f64],
        kernels: &[Vec<Point3>],
        world: &[Point3],
        image: &[Point2],
    ) -> Option<(RigidPose, f64)> {
        let nc = self.n_controls();
        let controls_cam: Vec<Point3> = (0..nc)
            .map(|j| betas.iter().zip(kernels).map(|(b, k)| k[j] * *b).sum())
            .collect();
        let mut camera: Vec<Point3> = self
            .alphas
            .iter()
            .map(|a| a.iter().zip(&controls_cam).map(|(w, c)| c * *w).sum())
            .collect();
        if camera.iter().map(|p| p.z).sum::<f64>() < 0.0 {
            camera.iter_mut().for_each(|p| *p = -*p);
        }
        let (r, t) = rigid_alignment(world, &camera)?;
        let err = normalized_error(&r, &t, world, image);
        err.is_finite()
            .then(|| (RigidPose::from_rotation_translation(&r, &t), err))
    }
}

/// Reprojection error in normalized image coordinates; infinite when a point
/// lies on the camera plane.
fn normalized_error(r: &Matrix3<f64>, t: &Point3, world: &[Point3], image: &[Point2]) -> f64 {
    let mut err = 0.0;
    for (x, uv) in world.iter().zip(image) {
        let pc = r * x + t;
        if pc.z.abs() < 1e-12 {
            return f64::INFINITY;
        }
        err += (Point2::new(pc.x / pc.z, pc.y / pc.z) - uv).norm_squared();
    }
    err
}

/// Linearized distance constraints for the first `case` kernel vectors.
fn initial_betas(
    case: usize,
    n_kernel: usize,
    dots: &[Vec<Vec<f64>>],
    rho: &[f64],
) -> Option<Vec<f64>> {
    let mut betas = vec![0.0; n_kernel];
    if case == 1 {
        // Closed form: β = Σ‖dv‖·‖dc‖ / Σ‖dv‖².
        let (num, den) = dots.iter().zip(rho).fold((0.0, 0.0), |(n, d), (dp, r)| {
            (n + dp[0][0].sqrt() * r.sqrt(), d + dp[0][0])
        });
        if den <= 0.0 {
            return None;
        }
        betas[0] = num / den;
        return Some(betas);
    }
    // Unknowns b_kl = β_k β_l for k ≤ l, ordered (0,0), (0,1), (1,1), (0,2), ...
    let products: Vec<(usize, usize)> = (0..case)
        .flat_map(|l| (0..=l).map(move |k| (k, l)))
        .collect();
    let l = DMatrix::from_fn(rho.len(), products.len(), |p, c| {
        let (k, m) = products[c];
        if k == m {
            dots[p][k][k]
        } else {
            2.0 * dots[p][k][m]
        }
    });
    let b = l
        .svd(true, true)
        .solve(&DVector::from_column_slice(rho), 1e-14)
        .ok()?;
    let at = |k: usize, m: usize| {
        b[products
            .iter()
            .position(|&q| q == (k.min(m), k.max(m)))
            .unwrap()]
    };
    let b11 = at(0, 0);
    betas[0] = b11.abs().sqrt();
    if betas[0] < 1e-15 {
        return None;
    }
    for k in 1..case {
        betas[k] = at(0, k) / betas[0];
    }
    Some(betas)
}

/// Gauss-Newton on `Σ_p (‖Σ_k β_k dv_k‖² − ρ_p)²` over all kernel betas.
fn polish_betas(betas: &mut [f64], dots: &[Vec<Vec<f64>>], rho: &[f64]) {
    let nk = betas.len();
    let cost_of = |b: &[f64]| -> f64 {
        dots.iter()
            .zip(rho)
            .map(|(d, r)| {
                let mut s = -r;
                for k in 0..nk {
                    for m in 0..nk {
                        s += b[k] * b[m] * d[k][m];
                    }
                }
                s * s
            })
            .sum()
    };
    let mut cost = cost_of(betas);
    for _ in 0..BETA_GN_ITERS {
        let mut jac = DMatrix::<f64>::zeros(rho.len(), nk);
        let mut res = DVector::<f64>::zeros(rho.len());
        for (p, (d, r)) in dots.iter().zip(rho).enumerate() {
            let mut s = -r;
            for k in 0..nk {
                let mut g = 0.0;
                for m in 0..nk {
                    s += betas[k] * betas[m] * d[k][m];
                    g += betas[m] * d[k][m];
                }
                jac[(p, k)] = 2.0 * g;
            }
            res[p] = s;
        }
        let Ok(step) = jac.svd(true, true).solve(&(-res), 1e-14) else {
            break;
        };
        let candidate: Vec<f64> = betas.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
        let new_cost = cost_of(&candidate);
        if !(new_cost < cost) {
            break;
        }
        betas.copy_from_slice(&candidate);
        cost = new_cost;
    }
}

/// Least-squares rotation and translation with `camera ≈ R·world + t`.
pub(crate) fn rigid_alignment(
    world: &[Point3],
    camera: &[Point3],
) -> Option<(Matrix3<f64>, Point3)> {
    let n = world.len() as f64;
    let cw = world.iter().sum::<Point3>() / n;
    let cc = camera.iter().sum::<Point3>() / n;
    let h = world
        .iter()
        .zip(camera)
        .map(|(w, c)| (w - cw) * (c - cc).transpose())
        .sum::<Matrix3<f64>>();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d)) * u.transpose();
    r.iter().all(|x| x.is_finite()).then(|| (r, cc - r * cw))
}

/// EPnP for fixed intrinsics, using the visible keypoints only.
pub fn epnp(
    kp3d: &KeypointSet3D,
    kp2d: &KeypointSet2D,
    intrinsics: &CameraIntrinsics,
) -> Result<RigidPose, SolveError> {
    let (world, pixels) = visible_pairs(kp3d, kp2d)?;
    if world.len() < 4 {
        return Err(SolveError::TooFewPoints {
            visible: world.len(),
        });
    }
    let frame = ControlFrame::new(&world)?;
    let normalized: Vec<Point2> = pixels.iter().map(|p| intrinsics.normalize(p)).collect();
    frame.solve(&world, &normalized)
}
