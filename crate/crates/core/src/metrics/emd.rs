//! Earth Mover's distance between equal-size point clouds via the auction
//! algorithm with ε-scaling.

use serde::{Deserialize, Serialize};

use super::{MetricError, PointCloud};
use crate::geometry::Point3;

/// Bijection `i → mapping[i]` from the first cloud onto the second, with its
/// mean Euclidean matching cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub mapping: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// Mean matching cost of `mapping`, recomputed from the clouds.
    pub fn evaluate(mapping: &[usize], s1: &[Point3], s2: &[Point3]) -> f64 {
        let sum: f64 = mapping
            .iter()
            .enumerate()
            .map(|(i, &j)| (s1[i] - s2[j]).norm())
            .sum();
        sum / mapping.len() as f64
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.mapping.len()];
        self.mapping
            .iter()
            .all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }
}

/// Approximate EMD: `(1/n)·Σ‖xᵢ − y_φ(i)‖` for the bijection φ found by the
/// auction. The returned cost is at most `(1 + epsilon)` times the optimum,
/// plus an additive slack of at most `max(epsilon · 1e-9, 1.5e-14) · max_cost`
/// (`max_cost` being the largest pairwise distance) that only matters when
/// the optimum is (almost) zero.
///
/// Bidding is Gauss-Seidel over persons in index order with a FIFO queue,
/// so the result is deterministic.
pub fn emd(
    s1: &PointCloud,
    s2: &PointCloud,
    epsilon: f64,
) -> Result<(f64, Assignment), MetricError> {
    let (a, b) = (s1.points(), s2.points());
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    if a.len() != b.len() {
        return Err(MetricError::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(MetricError::InvalidConfig(format!(
            "emd epsilon must be positive, got {epsilon}"
        )));
    }
    let n = a.len();
    let cost: Vec<f64> = a
        .iter()
        .flat_map(|p| b.iter().map(move |q| (p - q).norm()))
        .collect();
    let mapping = auction(&cost, n, epsilon);
    let c = Assignment::evaluate(&mapping, a, b);
    Ok((c, Assignment { mapping, cost: c }))
}

/// Minimum-cost perfect matching on the dense `n×n` cost matrix (row-major),
/// within a `(1 + rel)` factor of the optimum.
pub(crate) fn auction(cost: &[f64], n: usize, rel: f64) -> Vec<usize> {
    if n == 1 {
        return vec![0];
    }
    let row = |i: usize| &cost[i * n..(i + 1) * n];
    let max_cost = cost.iter().cloned().fold(0.0, f64::max);
    if max_cost == 0.0 {
        return (0..n).collect();
    }
    // Lower bound on the optimal total cost: every person pays at least its
    // cheapest object, and every object is bought by at least its cheapest
    // person.
    let row_lb: f64 = (0..n)
        .map(|i| row(i).iter().cloned().fold(f64::INFINITY, f64::min))
        .sum();
    let col_lb: f64 = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| cost[i * n + j])
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    let lower_bound = row_lb.max(col_lb).max(1e-9 * max_cost);
    // Assignments that are ε-complementary-slack cost at most OPT + n·ε.
    // The floor keeps price increments above the rounding granularity.
    let final_eps = (rel * lower_bound.min(1.0) / n as f64).max(64.0 * f64::EPSILON * max_cost);

    let mut price = vec![0.0f64; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut eps = max_cost / 4.0;
    loop {
        eps = eps.max(final_eps);
        owner.iter_mut().for_each(|o| *o = None);
        assigned.iter_mut().for_each(|a| *a = None);
        let mut queue: std::collections::VecDeque<usize> = (0..n).collect();
        while let Some(i) = queue.pop_front() {
            // Maximize value −cost − price.
            let (mut best_j, mut best_v, mut second_v) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (j, (&c, &p)) in row(i).iter().zip(&price).enumerate() {
                let v = -c - p;
                if v > best_v {
                    second_v = best_v;
                    best_v = v;
                    best_j = j;
                } else if v > second_v {
                    second_v = v;
                }
            }
            price[best_j] += best_v - second_v + eps;
            if let Some(prev) = owner[best_j].replace(i) {
                assigned[prev] = None;
                queue.push_back(prev);
            }
            assigned[i] = Some(best_j);
        }
        let mapping: Vec<usize> = assigned
            .iter()
            .map(|a| a.expect("auction phase ends with a full assignment"))
            .collect();
        let total: f64 = mapping
            .iter()
            .enumerate()
            .map(|(i, &j)| cost[i * n + j])
            .sum();
        if eps <= final_eps || total <= (1.0 + rel) * lower_bound {
            return mapping;
        }
        eps /= 4.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::chamfer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    /// Exhaustive minimum over all permutations (Heap's algorithm).
    fn brute_force(a: &PointCloud, b: &PointCloud) -> f64 {
        let n = a.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = Assignment::evaluate(&perm, a.points(), b.points());
        let mut c = vec![0; n];
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                best = best.min(Assignment::evaluate(&perm, a.points(), b.points()));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        best
    }

    #[test]
    fn two_point_example() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        let (d, asg) = emd(&a, &b, 0.002).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert_eq!(asg.mapping, vec![0, 1]);
    }

    #[test]
    fn identical_clouds_cost_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let a = cloud(&pts);
        let (d, asg) = emd(&a, &a, 0.002).unwrap();
        assert_eq!(d, 0.0);
        assert!(asg.is_bijection());
    }

    #[test]
    fn errors() {
        let a = cloud(&[[0.0; 3]]);
        let b = cloud(&[[0.0; 3], [1.0; 3]]);
        assert!(matches!(
            emd(&a, &b, 0.01),
            Err(MetricError::SizeMismatch { left: 1, right: 2 })
        ));
        assert!(matches!(
            emd(&cloud(&[]), &cloud(&[]), 0.01),
            Err(MetricError::EmptyCloud)
        ));
        assert!(matches!(
            emd(&a, &a, 0.0),
            Err(MetricError::InvalidConfig(_))
        ));
    }

    #[test]
    fn within_bound_of_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let eps = 0.002;
        for trial in 0..200 {
            let n = rng.random_range(1..=7);
            let mut draw = || {
                cloud(
                    &(0..n)
                        .map(|_| [rng.random(), rng.random(), rng.random()])
                        .collect::<Vec<_>>(),
                )
            };
            let (a, b) = (draw(), draw());
            let (d, asg) = emd(&a, &b, eps).unwrap();
            let opt = brute_force(&a, &b);
            assert!(asg.is_bijection());
            assert!(
                (asg.cost - Assignment::evaluate(&asg.mapping, a.points(), b.points())).abs()
                    < 1e-9
            );
            assert!(
                d <= (1.0 + eps) * opt + 1e-12,
                "trial {trial}: {d} vs {opt}"
            );
        }
    }

    #[test]
    fn larger_instance_is_near_optimal_and_above_nearest_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pts = |rng: &mut ChaCha8Rng| {
            PointCloud::new(
                (0..300)
                    .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
                    .collect(),
            )
            .unwrap()
        };
        let (a, b) = (pts(&mut rng), pts(&mut rng));
        let (d, asg) = emd(&a, &b, 0.002).unwrap();
        assert!(asg.is_bijection());
        let lb = crate::metrics::mean_nearest_distance(&a, &b).unwrap();
        assert!(d >= lb);
        assert!(d >= 0.5 * chamfer(&a, &b).unwrap() - 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn symmetric_scale_and_rigid_invariant(
            pts in prop::collection::vec((prop::array::uniform3(-1.0f64..1.0), prop::array::uniform3(-1.0f64..1.0)), 1..7),
            scale in prop::sample::select(vec![0.5f64, 2.0]),
            angle in -3.0f64..3.0,
        ) {
            let a = cloud(&pts.iter().map(|p| p.0).collect::<Vec<_>>());
            let b = cloud(&pts.iter().map(|p| p.1).collect::<Vec<_>>());
            let eps = 1e-6;
            let opt = brute_force(&a, &b);
            let (d, _) = emd(&a, &b, eps).unwrap();
            let (d_rev, _) = emd(&b, &a, eps).unwrap();
            prop_assert!(d >= opt - 1e-12 && d <= (1.0 + eps) * opt + 1e-12);
            prop_assert!(d_rev >= opt - 1e-12 && d_rev <= (1.0 + eps) * opt + 1e-12);
            let s = |c: &PointCloud| c.map(|p| p * scale);
            let (ds, _) = emd(&s(&a), &s(&b), eps).unwrap();
            prop_assert!((ds - scale * d).abs() <= 2.0 * eps * scale * opt + 1e-9);
            let r = crate::geometry::rot_z(angle);
            let t = Point3::new(0.3, -2.0, 5.0);
            let m = |c: &PointCloud| c.map(|p| r * p + t);
            let (dr, _) = emd(&m(&a), &m(&b), eps).unwrap();
            prop_assert!((dr - d).abs() <= 2.0 * eps * opt + 1e-9);
        }
    }
}
