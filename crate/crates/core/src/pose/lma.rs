//! Levenberg-Marquardt refinement of `(theta, phi, psi, x, y, z, f)`.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{select_best, visible_pairs, AlignmentSolution, SolveError, SolverConfig};
use crate::geometry::{
    compose, reprojection_error, rot_x, rot_y, rot_z, ImageSize, KeypointSet2D, KeypointSet3D,
    Point2, Point3, RigidPose, DEGENERATE_DEPTH,
};

type Params = SVector<f64, 7>;
type Normal7 = SMatrix<f64, 7, 7>;

const INITIAL_DAMPING: f64 = 1e-3;
const MAX_DAMPING: f64 = 1e16;

/// Least-squares problem over the visible correspondences.
pub(crate) struct ReprojectionProblem<'a> {
    world: &'a [Point3],
    pixels: &'a [Point2],
    principal: Point2,
}

impl<'a> ReprojectionProblem<'a> {
    pub(crate) fn new(world: &'a [Point3], pixels: &'a [Point2], image: ImageSize) -> Self {
        Self {
            world,
            pixels,
            principal: Point2::new(image.width as f64 / 2.0, image.height as f64 / 2.0),
        }
    }

    fn rotation(p: &Params) -> Matrix3<f64> {
        rot_z(p[2]) * rot_y(p[0]) * rot_x(p[1])
    }

    /// Objective value; `None` if any point lands on the camera plane or the
    /// focal length is not positive.
    pub(crate) fn cost(&self, p: &Params) -> Option<f64> {
        if !(p[6] > 0.0) {
            return None;
        }
        let r = Self::rotation(p);
        let t = Point3::new(p[3], p[4], p[5]);
        let mut sum = 0.0;
        for (x, uv) in self.world.iter().zip(self.pixels) {
            let c = r * x + t;
            if c.z.abs() < DEGENERATE_DEPTH {
                return None;
            }
            let proj = Point2::new(c.x / c.z, c.y / c.z) * p[6] + self.principal;
            sum += (proj - uv).norm_squared();
        }
        sum.is_finite().then_some(sum)
    }

    /// Residual vector `Proj(X_i) − x_i`, stacked `(u, v)` per point.
    pub(crate) fn residuals(&self, p: &Params) -> Option<Vec<f64>> {
        let r = Self::rotation(p);
        let t = Point3::new(p[3], p[4], p[5]);
        let mut out = Vec::with_capacity(2 * self.world.len());
        for (x, uv) in self.world.iter().zip(self.pixels) {
            let c = r * x + t;
            if c.z.abs() < DEGENERATE_DEPTH {
                return None;
            }
            let proj = Point2::new(c.x / c.z, c.y / c.z) * p[6] + self.principal;
            out.push(proj.x - uv.x);
            out.push(proj.y - uv.y);
        }
        Some(out)
    }

    /// Analytic Jacobian rows, one `2 × 7` block per point.
    pub(crate) fn jacobian(&self, p: &Params) -> Option<Vec<SMatrix<f64, 2, 7>>> {
        let (rx, ry, rz) = (rot_x(p[1]), rot_y(p[0]), rot_z(p[2]));
        let r = rz * ry * rx;
        let d_theta = rz * d_rot_y(p[0]) * rx;
        let d_phi = rz * ry * d_rot_x(p[1]);
        let d_psi = d_rot_z(p[2]) * ry * rx;
        let t = Point3::new(p[3], p[4], p[5]);
        let f = p[6];
        self.world
            .iter()
            .map(|x| {
                let c = r * x + t;
                if c.z.abs() < DEGENERATE_DEPTH {
                    return None;
                }
                let iz = 1.0 / c.z;
                let dproj = Matrix2x3::new(
                    f * iz,
                    0.0,
                    -f * c.x * iz * iz, //
                    0.0,
                    f * iz,
                    -f * c.y * iz * iz,
                );
                let mut block = SMatrix::<f64, 2, 7>::zeros();
                block.set_column(0, &(dproj * (d_theta * x)));
                block.set_column(1, &(dproj * (d_phi * x)));
                block.set_column(2, &(dproj * (d_psi * x)));
                block.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
                block[(0, 6)] = c.x * iz;
                block[(1, 6)] = c.y * iz;
                Some(block)
            })
            .collect()
    }

    fn normal_equations(&self, p: &Params) -> Option<(Normal7, Params)> {
        let residuals = self.residuals(p)?;
        let blocks = self.jacobian(p)?;
        let mut jtj = Normal7::zeros();
        let mut jtr = Params::zeros();
        for (i, j) in blocks.iter().enumerate() {
            let r = nalgebra::Vector2::new(residuals[2 * i], residuals[2 * i + 1]);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        Some((jtj, jtr))
    }

    /// Damped Gauss-Newton from `start`. Only strictly improving steps are
    /// accepted, so the returned cost never exceeds the starting cost.
    pub(crate) fn minimize(&self, start: Params, config: &SolverConfig) -> Option<(Params, f64)> {
        let mut p = start;
        let mut cost = self.cost(&p)?;
        let mut lambda = INITIAL_DAMPING;
        for _ in 0..config.lma_max_iter {
            if cost == 0.0 {
                break;
            }
            let Some((jtj, jtr)) = self.normal_equations(&p) else {
                break;
            };
            let mut accepted = None;
            while lambda <= MAX_DAMPING {
                let mut a = jtj;
                for d in 0..7 {
                    a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
                }
                let step = a.cholesky().map(|ch| ch.solve(&(-jtr)));
                match step.and_then(|s| {
                    let cand = p + s;
                    self.cost(&cand).map(|c| (cand, c, s))
                }) {
                    Some((cand, c, s)) if c < cost => {
                        accepted = Some((cand, c, s));
                        lambda = (lambda / 10.0).max(1e-15);
                        break;
                    }
                    _ => lambda *= 10.0,
                }
            }
            let Some((cand, new_cost, step)) = accepted else {
                break;
            };
            let improvement = (cost - new_cost) / cost;
            p = cand;
            cost = new_cost;
            if improvement < config.lma_tol || step.norm() <= 1e-15 * (p.norm() + 1e-15) {
                break;
            }
        }
        Some((p, cost))
    }
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn to_params(pose: &RigidPose, focal: f64) -> Params {
    let a = pose.to_array();
    Params::from_column_slice(&[a[0], a[1], a[2], a[3], a[4], a[5], focal])
}

fn from_params(p: &Params) -> (RigidPose, f64) {
    (RigidPose::new(p[0], p[1], p[2], p[3], p[4], p[5]), p[6])
}

/// Start states: the initial estimate followed by `n_restarts` Gaussian
/// disturbances of it, drawn in a fixed order from the configured seed.
fn start_states(initial: &Params, config: &SolverConfig) -> Vec<Params> {
    let sig = &config.disturbance_sigmas;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let t_norm = Point3::new(initial[3], initial[4], initial[5]).norm();
    let sigmas = [
        sig.rotation_deg.to_radians(),
        sig.rotation_deg.to_radians(),
        sig.rotation_deg.to_radians(),
        sig.translation_rel * t_norm,
        sig.translation_rel * t_norm,
        sig.translation_rel * t_norm,
        sig.focal_rel * initial[6],
    ];
    let mut starts = vec![*initial];
    for _ in 0..config.n_restarts {
        let mut p = *initial;
        for (k, s) in sigmas.iter().enumerate() {
            p[k] += s * unit.sample(&mut rng);
        }
        p[6] = p[6].max(1.0);
        starts.push(p);
    }
    starts
}

/// Refines `initial` with LM from the unperturbed state plus `n_restarts`
/// disturbed copies, returning the lowest-error result. The returned error
/// never exceeds the error of `initial`.
pub fn refine_lma(
    initial: &AlignmentSolution,
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
    let initial_error = initial.error_on(kp3d, kp2d, image)?;
    let problem = ReprojectionProblem::new(&world, &pixels, image);
    let starts = start_states(&to_params(&initial.pose, initial.focal), config);

    let refined: Vec<Option<AlignmentSolution>> = starts
        .par_iter()
        .map(|s| {
            let (p, _) = problem.minimize(*s, config)?;
            let (pose, focal) = from_params(&p);
            let pose = pose.canonical();
            let k = image.intrinsics(focal).ok()?;
            let error = reprojection_error(&compose(&k, &pose), kp3d, kp2d).ok()?;
            Some(AlignmentSolution {
                pose,
                focal,
                error,
                ..initial.clone()
            })
        })
        .collect();

    let best = select_best(refined.into_iter().flatten())
        .ok_or_else(|| SolveError::NoSolution("every LM restart diverged".into()))?;
    if best.error <= initial_error {
        Ok(best)
    } else {
        Ok(AlignmentSolution {
            error: initial_error,
            ..initial.clone()
        })
    }
}
