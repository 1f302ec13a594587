//! Point clouds: surface sampling, normalization and Chamfer distance.

use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::geometry::{Point3, TriangleMesh};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self, MetricError> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(MetricError::Parse("non-finite point coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(
            self.points
                .iter()
                .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))),
        )
    }

    pub fn map<F: Fn(&Point3) -> Point3>(&self, f: F) -> Self {
        Self {
            points: self.points.iter().map(f).collect(),
        }
    }

    /// Whitespace-separated `x y z`, one point per line; blank lines and
    /// lines starting with `#` are skipped.
    pub fn read_xyz<R: BufRead>(r: R) -> Result<Self, MetricError> {
        let mut points = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let c: Vec<f64> = t
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| MetricError::Parse(format!("line {}: {e}", lineno + 1)))?;
            if c.len() != 3 {
                return Err(MetricError::Parse(format!(
                    "line {}: expected 3 coordinates, found {}",
                    lineno + 1,
                    c.len()
                )));
            }
            points.push(Point3::new(c[0], c[1], c[2]));
        }
        Self::new(points)
    }

    /// Writes with full round-trip precision.
    pub fn write_xyz<W: Write>(&self, mut w: W) -> Result<(), MetricError> {
        for p in &self.points {
            writeln!(w, "{:?} {:?} {:?}", p.x, p.y, p.z)?;
        }
        Ok(())
    }
}

/// Draws `n` points uniformly over the surface of `mesh`: a triangle with
/// probability proportional to its area, then a uniform barycentric point.
/// The generator is ChaCha8 seeded with `seed`.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud, MetricError> {
    let areas: Vec<f64> = (0..mesh.faces().len())
        .map(|i| mesh.triangle_area(i))
        .collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(MetricError::DegenerateMesh);
    }
    let pick = WeightedIndex::new(&areas).map_err(|_| MetricError::DegenerateMesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let [a, b, c] = mesh.triangle(pick.sample(&mut rng));
            let s = rng.random::<f64>().sqrt();
            let t = rng.random::<f64>();
            a * (1.0 - s) + b * (s * (1.0 - t)) + c * (s * t)
        })
        .collect();
    Ok(PointCloud { points })
}

/// Translates and uniformly scales `cloud` so its bounding box is centered
/// at the origin with longest side 1.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud, MetricError> {
    let (lo, hi) = cloud.bounds().ok_or(MetricError::EmptyCloud)?;
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(MetricError::ZeroExtent);
    }
    let center = (lo + hi) / 2.0;
    Ok(cloud.map(|p| (p - center) / extent))
}

/// Static k-d tree over a point set, answering exact nearest-neighbor
/// distance queries.
pub struct KdTree<'a> {
    points: &'a [Point3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

const LEAF_SIZE: usize = 8;

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let (mut lo, mut hi) = (self.points[slice[0]], self.points[slice[0]]);
        for &i in slice {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = (start + end) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Squared distance from `q` to its nearest point; `None` on an empty tree.
    pub fn nearest_sq(&self, q: &Point3) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &Point3, best: &mut f64) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < *best {
                        *best = d;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                if diff * diff <= *best {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Mean distance from each point of `from` to its nearest point in `to`.
pub fn mean_nearest_distance(from: &PointCloud, to: &PointCloud) -> Result<f64, MetricError> {
    if from.is_empty() || to.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    let tree = KdTree::new(&to.points);
    let sum: f64 = from
        .points
        .iter()
        .map(|p| tree.nearest_sq(p).expect("tree is not empty").sqrt())
        .sum();
    Ok(sum / from.len() as f64)
}

/// Chamfer distance: the sum of the two directed mean nearest-neighbor
/// distances.
pub fn chamfer(s1: &PointCloud, s2: &PointCloud) -> Result<f64, MetricError> {
    Ok(mean_nearest_distance(s1, s2)? + mean_nearest_distance(s2, s1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
                .collect(),
        )
        .unwrap()
    }

    fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
        let dir = |x: &PointCloud, y: &PointCloud| {
            x.points()
                .iter()
                .map(|p| {
                    y.points()
                        .iter()
                        .map(|q| (p - q).norm_squared())
                        .fold(f64::INFINITY, f64::min)
                        .sqrt()
                })
                .sum::<f64>()
                / x.len() as f64
        };
        dir(a, b) + dir(b, a)
    }

    fn unit_square() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(1.0, 1.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn chamfer_single_points() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(matches!(
            chamfer(&a, &cloud(&[])),
            Err(MetricError::EmptyCloud)
        ));
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_cloud(&mut rng, 50);
            let b = random_cloud(&mut rng, 50);
            let fast = chamfer(&a, &b).unwrap();
            assert!((fast - brute_chamfer(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn kd_tree_handles_duplicates_and_large_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = random_cloud(&mut rng, 500).into_points();
        pts.extend(std::iter::repeat_n(Point3::new(0.5, 0.5, 0.5), 40));
        let tree = KdTree::new(&pts);
        for _ in 0..200 {
            let q = Point3::new(rng.random(), rng.random(), rng.random());
            let brute = pts
                .iter()
                .map(|p| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest_sq(&q).unwrap(), brute);
        }
        assert!(KdTree::new(&[]).nearest_sq(&Point3::zeros()).is_none());
    }

    #[test]
    fn sampling_quadrants_are_balanced() {
        let pc = sample_surface(&unit_square(), 10_000, 3).unwrap();
        let mut counts = [0usize; 4];
        for p in pc.points() {
            counts[(p.x >= 0.5) as usize + 2 * (p.y >= 0.5) as usize] += 1;
        }
        for c in counts {
            assert!((2350..=2650).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn sampled_points_lie_on_the_triangle_plane() {
        let tri = TriangleMesh::new(
            vec![
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 2.0, 0.0),
                Point3::new(0.0, 0.0, 3.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        // Plane 6x + 3y + 2z = 6.
        for p in sample_surface(&tri, 1000, 9).unwrap().points() {
            assert!((6.0 * p.x + 3.0 * p.y + 2.0 * p.z - 6.0).abs() < 1e-9);
            assert!(p.x >= -1e-12 && p.y >= -1e-12 && p.z >= -1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_surface(&unit_square(), 64, 42).unwrap();
        let b = sample_surface(&unit_square(), 64, 42).unwrap();
        let c = sample_surface(&unit_square(), 64, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_mesh() {
        let flat = TriangleMesh::new(
            vec![
                Point3::zeros(),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(2.0, 0.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(matches!(
            sample_surface(&flat, 10, 0),
            Err(MetricError::DegenerateMesh)
        ));
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])).unwrap();
        assert_eq!(n, cloud(&[[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]]));
        assert!(matches!(
            normalize(&cloud(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]])),
            Err(MetricError::ZeroExtent)
        ));
        assert!(matches!(
            normalize(&cloud(&[])),
            Err(MetricError::EmptyCloud)
        ));
    }

    #[test]
    fn xyz_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_cloud(&mut rng, 25);
        let mut buf = Vec::new();
        c.write_xyz(&mut buf).unwrap();
        assert_eq!(PointCloud::read_xyz(&buf[..]).unwrap(), c);
        assert!(PointCloud::read_xyz(&b"1 2\n"[..]).is_err());
        assert_eq!(
            PointCloud::read_xyz(&b"# c\n\n1 2 3\n"[..]).unwrap().len(),
            1
        );
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_centered(
            pts in prop::collection::vec(prop::array::uniform3(-100.0f64..100.0), 2..40)
        ) {
            let c = cloud(&pts);
            prop_assume!(c.bounds().map(|(l, h)| (h - l).max() > 1e-6).unwrap_or(false));
            let n = normalize(&c).unwrap();
            let (lo, hi) = n.bounds().unwrap();
            prop_assert!(((hi - lo).max() - 1.0).abs() < 1e-9);
            prop_assert!(((lo + hi) / 2.0).norm() < 1e-9);
            let nn = normalize(&n).unwrap();
            for (a, b) in n.points().iter().zip(nn.points()) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }

        #[test]
        fn chamfer_is_symmetric_and_scale_covariant(
            a in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..30),
            b in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..30),
            scale in prop::sample::select(vec![0.5f64, 2.0]),
        ) {
            let (a, b) = (cloud(&a), cloud(&b));
            let d = chamfer(&a, &b).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!((d - chamfer(&b, &a).unwrap()).abs() < 1e-12);
            let s = |c: &PointCloud| c.map(|p| p * scale);
            prop_assert!((chamfer(&s(&a), &s(&b)).unwrap() - scale * d).abs() < 1e-9);
        }
    }
}
