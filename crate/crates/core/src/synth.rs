//! Synthetic scenes, shapes and annotation noise for tests and examples.
//!
//! Everything here is driven by a caller-supplied RNG or seed, so fixtures
//! are reproducible.

use std::f64::consts::PI;

use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{save_annotations, AnnotationRecord, DatasetError, ANNOTATION_FILE};
use crate::geometry::{
    compose, project_all, rotation_matrix, CameraIntrinsics, ImageSize, KeypointSet2D,
    KeypointSet3D, Point2, Point3, RigidPose, TriangleMesh,
};
use crate::metrics::VoxelGrid;
use crate::pose::AnnotationTriple;
use crate::silhouette::render_silhouette;

pub const DEFAULT_IMAGE: ImageSize = ImageSize {
    width: 640,
    height: 480,
};

/// Posed keypoints with their exact projections.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub kp3d: KeypointSet3D,
    pub kp2d: KeypointSet2D,
    pub pose: RigidPose,
    pub focal: f64,
    pub image: ImageSize,
}

impl SyntheticScene {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.image
            .intrinsics(self.focal)
            .expect("synthetic focal is positive")
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_matrix(&self.pose)
    }
}

/// Random keypoints in the unit cube around the origin, seen by a camera with
/// `f ∈ [300, 2000]` from a distance at which the object spans roughly
/// 150–300 px. All keypoints project inside a 640×480 image.
pub fn random_scene<R: Rng>(rng: &mut R, n_points: usize) -> SyntheticScene {
    random_scene_with_focal(rng, n_points, None)
}

pub fn random_scene_with_focal<R: Rng>(
    rng: &mut R,
    n_points: usize,
    focal: Option<f64>,
) -> SyntheticScene {
    let image = DEFAULT_IMAGE;
    loop {
        let points = random_keypoints(rng, n_points);
        let focal = focal.unwrap_or_else(|| rng.random_range(300.0..2000.0));
        let pose = random_pose(rng, focal, image);
        let k = image.intrinsics(focal).unwrap();
        let kp3d = KeypointSet3D::new(points).unwrap();
        let Ok(kp2d) = project_all(&compose(&k, &pose), &kp3d) else {
            continue;
        };
        let margin = 10.0;
        let inside = kp2d.points().iter().all(|p| {
            p.x > margin
                && p.y > margin
                && p.x < image.width as f64 - margin
                && p.y < image.height as f64 - margin
        });
        if inside {
            return SyntheticScene {
                kp3d,
                kp2d,
                pose,
                focal,
                image,
            };
        }
    }
}

/// `n` points uniform in `[-0.5, 0.5]³`, rejecting nearly flat draws.
pub fn random_keypoints<R: Rng>(rng: &mut R, n: usize) -> Vec<Point3> {
    loop {
        let pts: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect();
        let c = pts.iter().sum::<Point3>() / n as f64;
        let cov = pts
            .iter()
            .map(|p| (p - c) * (p - c).transpose())
            .sum::<Matrix3<f64>>();
        let ev = cov.symmetric_eigenvalues();
        if n < 4 || ev.min() > 0.01 * ev.max() {
            return pts;
        }
    }
}

/// Uniform Euler angles in their canonical ranges, depth chosen for a
/// 150–300 px object, and a modest off-center shift.
pub fn random_pose<R: Rng>(rng: &mut R, focal: f64, image: ImageSize) -> RigidPose {
    let span_px = rng.random_range(150.0..300.0);
    let z = focal / span_px;
    let du = rng.random_range(-0.15..0.15) * image.width as f64;
    let dv = rng.random_range(-0.15..0.15) * image.height as f64;
    RigidPose::new(
        rng.random_range(-PI..PI),
        rng.random_range(-PI / 2.0..PI / 2.0),
        rng.random_range(-PI..PI),
        du * z / focal,
        dv * z / focal,
        z,
    )
}

/// Adds isotropic Gaussian pixel noise to every keypoint.
pub fn add_pixel_noise<R: Rng>(kp: &KeypointSet2D, sigma: f64, rng: &mut R) -> KeypointSet2D {
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    let pts = kp
        .points()
        .iter()
        .map(|p| p + Point2::new(normal.sample(rng), normal.sample(rng)))
        .collect();
    KeypointSet2D::new(pts, kp.visibility().to_vec()).unwrap()
}

/// Moves every keypoint by exactly `offset` pixels in a random direction.
pub fn corrupt<R: Rng>(kp: &KeypointSet2D, offset: f64, rng: &mut R) -> KeypointSet2D {
    let pts = kp
        .points()
        .iter()
        .map(|p| {
            let a = rng.random_range(0.0..2.0 * PI);
            p + Point2::new(a.cos(), a.sin()) * offset
        })
        .collect();
    KeypointSet2D::new(pts, kp.visibility().to_vec()).unwrap()
}

/// Uniform random keypoints over the image.
pub fn random_keypoints_2d<R: Rng>(rng: &mut R, n: usize, image: ImageSize) -> KeypointSet2D {
    KeypointSet2D::all_visible(
        (0..n)
            .map(|_| {
                Point2::new(
                    rng.random_range(0.0..image.width as f64),
                    rng.random_range(0.0..image.height as f64),
                )
            })
            .collect(),
    )
    .unwrap()
}

/// Closed box mesh `[−sx/2, sx/2] × [−sy/2, sy/2] × [−sz/2, sz/2]` with
/// outward-facing triangles.
pub fn box_mesh(sx: f64, sy: f64, sz: f64) -> TriangleMesh {
    let (hx, hy, hz) = (sx / 2.0, sy / 2.0, sz / 2.0);
    let vertices = (0..8)
        .map(|i| {
            Point3::new(
                if i & 1 == 0 { -hx } else { hx },
                if i & 2 == 0 { -hy } else { hy },
                if i & 4 == 0 { -hz } else { hz },
            )
        })
        .collect();
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3], // z-
        [4, 5, 6],
        [5, 7, 6], // z+
        [0, 1, 4],
        [1, 5, 4], // y-
        [2, 6, 3],
        [3, 6, 7], // y+
        [0, 4, 2],
        [2, 4, 6], // x-
        [1, 3, 5],
        [3, 7, 5], // x+
    ];
    TriangleMesh::new(vertices, faces).unwrap()
}

/// Closed triangular prism: an isosceles triangle of base `base` and height
/// `height` in the xy-plane, extruded over `depth` along z.
pub fn prism_mesh(base: f64, height: f64, depth: f64) -> TriangleMesh {
    let hz = depth / 2.0;
    let tri = [
        (-base / 2.0, -height / 2.0),
        (base / 2.0, -height / 2.0),
        (0.0, height / 2.0),
    ];
    let mut vertices = Vec::new();
    for z in [-hz, hz] {
        for (x, y) in tri {
            vertices.push(Point3::new(x, y, z));
        }
    }
    let faces = vec![
        [0, 2, 1],
        [3, 4, 5],
        [0, 1, 4],
        [0, 4, 3],
        [1, 2, 5],
        [1, 5, 4],
        [2, 0, 3],
        [2, 3, 5],
    ];
    TriangleMesh::new(vertices, faces).unwrap()
}

/// Occupancy of a ball of radius `radius` (in cells) centered in an `n³` grid.
pub fn sphere_grid(n: usize, radius: f64) -> VoxelGrid {
    let c = (n as f64 - 1.0) / 2.0;
    VoxelGrid::from_fn([n, n, n], |x, y, z| {
        let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2)).sqrt();
        if d <= radius {
            1.0
        } else {
            0.0
        }
    })
}

/// Occupancy of the axis-aligned block `[lo, hi)` in an `n³` grid.
pub fn block_grid(n: usize, lo: [usize; 3], hi: [usize; 3]) -> VoxelGrid {
    VoxelGrid::from_fn([n, n, n], |x, y, z| {
        let p = [x, y, z];
        if (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a]) {
            1.0
        } else {
            0.0
        }
    })
}

/// A family of distinct, smooth-ish occupancy shapes on a 32³ grid:
/// ellipsoids, boxes, and an ellipsoid with a box attached. `index` picks
/// the variant deterministically.
pub fn shape_grid(index: usize) -> VoxelGrid {
    let n = 32;
    let k = index as f64;
    let c = 15.5;
    match index % 3 {
        0 => {
            let (a, b, d) = (
                6.0 + (k * 0.7) % 8.0,
                5.0 + (k * 1.3) % 9.0,
                4.0 + (k * 0.9) % 10.0,
            );
            VoxelGrid::from_fn([n, n, n], |x, y, z| {
                let v = ((x as f64 - c) / a).powi(2)
                    + ((y as f64 - c) / b).powi(2)
                    + ((z as f64 - c) / d).powi(2);
                if v <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        1 => {
            let lo = [4 + index % 5, 6 + index % 4, 3 + index % 7];
            let hi = [20 + index % 9, 26 - index % 5, 22 + index % 6];
            block_grid(n, lo, hi)
        }
        _ => VoxelGrid::from_fn([n, n, n], |x, y, z| {
            let (fx, fy, fz) = (x as f64, y as f64, z as f64);
            let ball =
                ((fx - 12.0) / 7.0).powi(2) + ((fy - c) / 8.0).powi(2) + ((fz - c) / 6.0).powi(2);
            let seat = (12.0..26.0 + (k % 4.0)).contains(&fx)
                && (10.0..14.0).contains(&fy)
                && (8.0..24.0).contains(&fz);
            if ball <= 1.0 || seat {
                1.0
            } else {
                0.0
            }
        }),
    }
}

/// Keypoints of a synthetic model: the box corners, or the prism corners
/// plus the centroids of its two triangular caps.
pub fn model_keypoints(mesh: &TriangleMesh) -> KeypointSet3D {
    let v = mesh.vertices();
    let mut pts = v.to_vec();
    if v.len() == 6 {
        pts.push((v[0] + v[1] + v[2]) / 3.0);
        pts.push((v[3] + v[4] + v[5]) / 3.0);
    }
    KeypointSet3D::new(pts).unwrap()
}

/// Writes a complete dataset of `n` posed boxes and prisms under `root`:
/// OBJ models, PGM masks rendered from the stored cameras (also used as the
/// images), exact single-annotator keypoints and the annotation document.
/// Every model projects fully inside the 640×480 frame.
pub fn write_synthetic_dataset(
    root: &Path,
    n: usize,
    seed: u64,
) -> Result<Vec<AnnotationRecord>, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for dir in ["models", "masks", "images"] {
        let p = root.join(dir);
        std::fs::create_dir_all(&p).map_err(|source| DatasetError::Io { path: p, source })?;
    }
    let image = DEFAULT_IMAGE;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let (category, mesh) = if i % 2 == 0 {
            (
                "cube",
                box_mesh(
                    rng.random_range(0.6..1.2),
                    rng.random_range(0.6..1.2),
                    rng.random_range(0.6..1.2),
                ),
            )
        } else {
            (
                "prism",
                prism_mesh(
                    rng.random_range(0.8..1.2),
                    rng.random_range(0.8..1.2),
                    rng.random_range(0.5..1.0),
                ),
            )
        };
        let kp3d = model_keypoints(&mesh);
        let (pose, focal, kp2d) = loop {
            let focal = rng.random_range(400.0..1200.0);
            let pose = random_pose(&mut rng, focal, image);
            let p = compose(&image.intrinsics(focal).unwrap(), &pose);
            let Ok(all) = project_all(&p, &KeypointSet3D::new(mesh.vertices().to_vec()).unwrap())
            else {
                continue;
            };
            let inside = all.points().iter().all(|q| {
                q.x > 5.0
                    && q.y > 5.0
                    && q.x < image.width as f64 - 5.0
                    && q.y < image.height as f64 - 5.0
            });
            if inside {
                break (pose, focal, project_all(&p, &kp3d).unwrap());
            }
        };
        let id = format!("{category}_{i:03}");
        let rel = |dir: &str, ext: &str| format!("{dir}/{id}.{ext}");
        crate::dataset::save_mesh(&root.join(rel("models", "obj")), &mesh)?;
        let p = compose(&image.intrinsics(focal).unwrap(), &pose);
        let mask = render_silhouette(&mesh, &p, image.width as usize, image.height as usize)?;
        mask.save(&root.join(rel("masks", "pgm")))?;
        mask.save(&root.join(rel("images", "pgm")))?;
        records.push(AnnotationRecord {
            id: id.clone(),
            image_path: rel("images", "pgm"),
            mask_path: rel("masks", "pgm"),
            model_path: rel("models", "obj"),
            category: category.into(),
            keypoints_3d: kp3d,
            keypoint_annotations: AnnotationTriple::single(kp2d),
            pose: Some(pose),
            focal: Some(focal),
            image_size: image,
            truncated: false,
            occluded: false,
            version: 0,
        });
    }
    save_annotations(&root.join(ANNOTATION_FILE), &records)?;
    Ok(records)
}
