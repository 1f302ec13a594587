//! Camera model, keypoint containers and the reprojection objective.
//!
//! The camera follows the central-projection model: square pixels, zero skew
//! and the principal point at the image center, so the only intrinsic
//! parameter is the focal length `f`. A pose maps model coordinates into the
//! camera frame as `Xc = R·X + T`, and the full projection is `P = K·[R|T]`.
//!
//! # Conventions
//!
//! * Rotation: `R = Rz(psi) · Ry(theta) · Rx(phi)`. `theta` plays the role of
//!   azimuth and `phi` of elevation. Canonical ranges are
//!   `theta, psi ∈ [-π, π)` and `phi ∈ [-π/2, π/2]`.
//! * Pixels: origin at the top-left corner, `u` grows rightwards, `v` grows
//!   downwards, pixel centers sit at integer coordinates.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point2 = Vector2<f64>;
pub type Point3 = Vector3<f64>;

/// Homogeneous scales with magnitude below this are treated as points on the
/// camera plane.
pub const DEGENERATE_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("keypoint sets differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("point projects onto the camera plane (homogeneous scale {scale:e})")]
    DegenerateProjection { scale: f64 },
    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
}

/// Annotated 2D keypoints together with per-keypoint visibility flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKeypoints2D", into = "RawKeypoints2D")]
pub struct KeypointSet2D {
    points: Vec<Point2>,
    visible: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct RawKeypoints2D {
    points: Vec<[f64; 2]>,
    visible: Vec<bool>,
}

impl TryFrom<RawKeypoints2D> for KeypointSet2D {
    type Error = GeometryError;

    fn try_from(raw: RawKeypoints2D) -> Result<Self, Self::Error> {
        KeypointSet2D::new(
            raw.points.iter().map(|p| Point2::new(p[0], p[1])).collect(),
            raw.visible,
        )
    }
}

impl From<KeypointSet2D> for RawKeypoints2D {
    fn from(set: KeypointSet2D) -> Self {
        RawKeypoints2D {
            points: set.points.iter().map(|p| [p.x, p.y]).collect(),
            visible: set.visible,
        }
    }
}

impl KeypointSet2D {
    pub fn new(points: Vec<Point2>, visible: Vec<bool>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::InvalidKeypoints("empty keypoint set".into()));
        }
        if points.len() != visible.len() {
            return Err(GeometryError::LengthMismatch {
                left: points.len(),
                right: visible.len(),
            });
        }
        if let Some(i) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite()))
        {
            return Err(GeometryError::InvalidKeypoints(format!(
                "keypoint {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points, visible })
    }

    /// All keypoints marked visible.
    pub fn all_visible(points: Vec<Point2>) -> Result<Self, GeometryError> {
        let visible = vec![true; points.len()];
        Self::new(points, visible)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.visible[i]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    /// Indices of the visible keypoints, ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.visible[i]).collect()
    }

    /// Reorders keypoints so that entry `k` of the result is entry `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            points: order.iter().map(|&i| self.points[i]).collect(),
            visible: order.iter().map(|&i| self.visible[i]).collect(),
        }
    }
}

/// 3D keypoints on the model, index-aligned with a [`KeypointSet2D`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct KeypointSet3D {
    points: Vec<Point3>,
}

impl TryFrom<Vec<[f64; 3]>> for KeypointSet3D {
    type Error = GeometryError;

    fn try_from(raw: Vec<[f64; 3]>) -> Result<Self, Self::Error> {
        KeypointSet3D::new(raw.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }
}

impl From<KeypointSet3D> for Vec<[f64; 3]> {
    fn from(set: KeypointSet3D) -> Self {
        set.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

impl KeypointSet3D {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::InvalidKeypoints("empty keypoint set".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::InvalidKeypoints(format!(
                "3D keypoint {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            points: order.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Central-projection intrinsics: focal length plus image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(focal) || !ok(width) || !ok(height) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal {focal}, width {width} and height {height} must be positive and finite"
            )));
        }
        Ok(Self {
            focal,
            width,
            height,
        })
    }

    pub fn principal_point(&self) -> Point2 {
        Point2::new(self.width / 2.0, self.height / 2.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let c = self.principal_point();
        Matrix3::new(
            self.focal, 0.0, c.x, //
            0.0, self.focal, c.y, //
            0.0, 0.0, 1.0,
        )
    }

    /// Maps a pixel to normalized image-plane coordinates (`z = 1`).
    pub fn normalize(&self, pixel: &Point2) -> Point2 {
        (pixel - self.principal_point()) / self.focal
    }
}

/// Image dimensions in pixels; serialized as `[width, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl From<[u32; 2]> for ImageSize {
    fn from(v: [u32; 2]) -> Self {
        Self {
            width: v[0],
            height: v[1],
        }
    }
}

impl From<ImageSize> for [u32; 2] {
    fn from(s: ImageSize) -> Self {
        [s.width, s.height]
    }
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn intrinsics(&self, focal: f64) -> Result<CameraIntrinsics, GeometryError> {
        CameraIntrinsics::new(focal, self.width as f64, self.height as f64)
    }

    pub fn max_side(&self) -> f64 {
        self.width.max(self.height) as f64
    }
}

/// Object pose: three Euler angles (radians) and a translation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidPose {
    pub theta: f64,
    pub phi: f64,
    pub psi: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl RigidPose {
    pub fn new(theta: f64, phi: f64, psi: f64, x: f64, y: f64, z: f64) -> Self {
        Self {
            theta,
            phi,
            psi,
            x,
            y,
            z,
        }
    }

    pub fn translation(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.theta, self.phi, self.psi, self.x, self.y, self.z]
    }

    pub fn from_array(p: [f64; 6]) -> Self {
        Self::new(p[0], p[1], p[2], p[3], p[4], p[5])
    }

    /// Recovers canonical Euler angles from a rotation matrix.
    ///
    /// `rotation` must be a proper rotation. At gimbal lock (`cos(theta) = 0`)
    /// `phi` is set to zero and the remaining freedom goes into `psi`.
    pub fn from_rotation_translation(rotation: &Matrix3<f64>, t: &Point3) -> Self {
        let r = rotation;
        let sin_theta = (-r[(2, 0)]).clamp(-1.0, 1.0);
        let cos_theta = (r[(2, 1)].powi(2) + r[(2, 2)].powi(2)).sqrt();
        let (theta, phi, psi) = if cos_theta > 1e-12 {
            (
                sin_theta.atan2(cos_theta),
                r[(2, 1)].atan2(r[(2, 2)]),
                r[(1, 0)].atan2(r[(0, 0)]),
            )
        } else {
            // R = Rz(psi) Ry(±π/2): the first two columns only depend on psi ∓ phi.
            (
                sin_theta.signum() * FRAC_PI_2,
                0.0,
                (-r[(0, 1)]).atan2(r[(1, 1)]),
            )
        };
        Self::new(theta, phi, psi, t.x, t.y, t.z).canonical()
    }

    /// Same rotation expressed in the canonical angle ranges.
    ///
    /// Uses the identity `(theta, phi, psi) ≡ (π - theta, phi + π, psi + π)`
    /// to bring `phi` into `[-π/2, π/2]`.
    pub fn canonical(&self) -> Self {
        let mut theta = wrap_angle(self.theta);
        let mut phi = wrap_angle(self.phi);
        let mut psi = wrap_angle(self.psi);
        if phi.abs() > FRAC_PI_2 {
            theta = wrap_angle(PI - theta);
            phi = wrap_angle(phi + PI);
            psi = wrap_angle(psi + PI);
        }
        Self {
            theta,
            phi,
            psi,
            ..*self
        }
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `R = Rz(psi) · Ry(theta) · Rx(phi)`.
pub fn rotation_matrix(pose: &RigidPose) -> Matrix3<f64> {
    rot_z(pose.psi) * rot_y(pose.theta) * rot_x(pose.phi)
}

/// Geodesic angle (radians) between two rotations.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let cos = (((a.transpose() * b).trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    cos.acos()
}

/// A 3×4 camera projection matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    /// Homogeneous image of a model point.
    pub fn apply(&self, point: &Point3) -> Vector3<f64> {
        self.0 * Vector4::new(point.x, point.y, point.z, 1.0)
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        Self(self.0 * lambda)
    }

    /// Splits `P` back into intrinsics and pose by an RQ decomposition of its
    /// left 3×3 block. The principal point found this way determines the image
    /// size; `f` is the mean of the two diagonal entries.
    pub fn decompose(&self) -> Result<(CameraIntrinsics, RigidPose), GeometryError> {
        let m = self.0.fixed_view::<3, 3>(0, 0).into_owned();
        let scale = m.row(2).norm();
        if scale < DEGENERATE_DEPTH {
            return Err(GeometryError::DegenerateProjection { scale });
        }
        let sign = if m.determinant() < 0.0 { -1.0 } else { 1.0 };
        let p = self.0 * (sign / scale);
        let m = p.fixed_view::<3, 3>(0, 0).into_owned();
        let (k, r) = rq3(&m);
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidIntrinsics("singular intrinsic block".into()))?;
        let t = k_inv * p.column(3);
        let k = k / k[(2, 2)];
        let intrinsics = CameraIntrinsics::new(
            0.5 * (k[(0, 0)] + k[(1, 1)]),
            2.0 * k[(0, 2)],
            2.0 * k[(1, 2)],
        )?;
        Ok((intrinsics, RigidPose::from_rotation_translation(&r, &t)))
    }
}

/// RQ decomposition with a positive-diagonal upper-triangular factor.
fn rq3(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    // Reverse rows, QR the transpose, then undo the reversal.
    let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (flip * m).transpose().qr();
    let (q, r) = (qr.q(), qr.r());
    let mut upper = flip * r.transpose() * flip;
    let mut rot = flip * q.transpose();
    for i in 0..3 {
        if upper[(i, i)] < 0.0 {
            upper.column_mut(i).neg_mut();
            rot.row_mut(i).neg_mut();
        }
    }
    (upper, rot)
}

/// `P = K · [R | T]`.
pub fn compose(intrinsics: &CameraIntrinsics, pose: &RigidPose) -> ProjectionMatrix {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&rotation_matrix(pose));
    rt.set_column(3, &pose.translation());
    ProjectionMatrix(intrinsics.matrix() * rt)
}

/// Projects a model point to pixel coordinates.
pub fn project(p: &ProjectionMatrix, point: &Point3) -> Result<Point2, GeometryError> {
    let h = p.apply(point);
    if h.z.abs() < DEGENERATE_DEPTH {
        return Err(GeometryError::DegenerateProjection { scale: h.z });
    }
    Ok(Point2::new(h.x / h.z, h.y / h.z))
}

/// Per-keypoint pixel residual `Proj(X_i) - x_i`; `None` for hidden keypoints.
pub fn reprojection_residuals(
    p: &ProjectionMatrix,
    kp3d: &KeypointSet3D,
    kp2d: &KeypointSet2D,
) -> Result<Vec<Option<Point2>>, GeometryError> {
    if kp3d.len() != kp2d.len() {
        return Err(GeometryError::LengthMismatch {
            left: kp3d.len(),
            right: kp2d.len(),
        });
    }
    kp3d.points()
        .iter()
        .zip(kp2d.points())
        .zip(kp2d.visibility())
        .map(|((x3, x2), &vis)| {
            if vis {
                project(p, x3).map(|uv| Some(uv - x2))
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Sum of squared pixel distances over the visible keypoints.
pub fn reprojection_error(
    p: &ProjectionMatrix,
    kp3d: &KeypointSet3D,
    kp2d: &KeypointSet2D,
) -> Result<f64, GeometryError> {
    Ok(reprojection_residuals(p, kp3d, kp2d)?
        .into_iter()
        .flatten()
        .map(|r| r.norm_squared())
        .sum())
}

/// Projects every keypoint; the result is marked fully visible.
pub fn project_all(
    p: &ProjectionMatrix,
    kp3d: &KeypointSet3D,
) -> Result<KeypointSet2D, GeometryError> {
    let pts = kp3d
        .points()
        .iter()
        .map(|x| project(p, x))
        .collect::<Result<Vec<_>, _>>()?;
    KeypointSet2D::all_visible(pts)
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TriangleMesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i >= vertices.len()) {
                return Err(GeometryError::InvalidMesh(format!(
                    "face {fi} references vertex {bad} but only {} exist",
                    vertices.len()
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(GeometryError::InvalidMesh(format!(
                    "face {fi} repeats a vertex index"
                )));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, face: usize) -> [Point3; 3] {
        let f = self.faces[face];
        [
            self.vertices[f[0]],
            self.vertices[f[1]],
            self.vertices[f[2]],
        ]
    }

    pub fn triangle_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).sum()
    }

    /// Volume enclosed by a closed, consistently oriented mesh (positive for
    /// outward-facing triangles).
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Axis-aligned bounds `(min, max)`, `None` for a mesh without vertices.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))),
        )
    }

    /// Applies a rigid transform `v ↦ R·v + t` to every vertex.
    pub fn transformed(&self, rotation: &Matrix3<f64>, t: &Point3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| rotation * v + t).collect(),
            faces: self.faces.clone(),
        }
    }
}
