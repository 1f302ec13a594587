//! Exact pose from three correspondences (Grunert's formulation).

use nalgebra::{DMatrix, Matrix3};

use super::epnp::rigid_alignment;
use crate::geometry::{Point2, Point3};

/// Candidate poses `(R, t)` from the best-conditioned triple of `world`,
/// given normalized image coordinates. Up to four solutions.
pub(crate) fn solve_minimal(world: &[Point3], image: &[Point2]) -> Vec<(Matrix3<f64>, Point3)> {
    let n = world.len();
    let mut best: Option<([usize; 3], f64)> = None;
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                let area = (world[b] - world[a]).cross(&(world[c] - world[a])).norm();
                if best.is_none_or(|(_, x)| area > x) {
                    best = Some(([a, b, c], area));
                }
            }
        }
    }
    match best {
        Some((idx, area)) if area > 0.0 => p3p(idx.map(|i| world[i]), idx.map(|i| image[i])),
        _ => Vec::new(),
    }
}

/// Solves for the depths `s_i` of three world points along their viewing
/// rays. With `s2 = u·s1` and `s3 = v·s1` the law of cosines on the three
/// sides gives two conics in `(u, v)`; eliminating `u` leaves a quartic in
/// `v`.
fn p3p(world: [Point3; 3], image: [Point2; 3]) -> Vec<(Matrix3<f64>, Point3)> {
    let j = image.map(|p| Point3::new(p.x, p.y, 1.0).normalize());
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    if b2 <= 0.0 {
        return Vec::new();
    }
    let (ca, cb, cg) = (j[1].dot(&j[2]), j[0].dot(&j[2]), j[0].dot(&j[1]));

    // Polynomials in v, lowest degree first.
    let q = [1.0, -2.0 * cb, 1.0];
    let num = [a2 - c2 + b2, -2.0 * cb * (a2 - c2), a2 - c2 - b2];
    let den = [2.0 * b2 * cg, -2.0 * b2 * ca];
    let rest = [b2 - c2 * q[0], -c2 * q[1], -c2 * q[2]];
    let quartic = add(
        &add(
            &scale(&mul(&num, &num), b2),
            &scale(&mul(&num, &den), -2.0 * b2 * cg),
        ),
        &mul(&rest, &mul(&den, &den)),
    );

    let mut out = Vec::new();
    for v in real_roots(&quartic) {
        let d = eval(&den, v);
        if d.abs() < 1e-12 * b2 {
            continue;
        }
        let u = eval(&num, v) / d;
        let s1_sq = c2 / (1.0 + u * u - 2.0 * u * cg);
        if !(s1_sq > 0.0) || !(u > 0.0) || !(v > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let camera = [j[0] * s1, j[1] * (u * s1), j[2] * (v * s1)];
        if let Some(rt) = rigid_alignment(&world, &camera) {
            out.push(rt);
        }
    }
    out
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (k, y) in b.iter().enumerate() {
            out[i + k] += x * y;
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    (0..a.len().max(b.len()))
        .map(|i| a.get(i).unwrap_or(&0.0) + b.get(i).unwrap_or(&0.0))
        .collect()
}

fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

fn eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Real roots from the companion matrix, refined by Newton steps.
fn real_roots(p: &[f64]) -> Vec<f64> {
    let max = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let mut deg = p.len() - 1;
    while deg > 0 && p[deg].abs() <= 1e-14 * max {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = p[deg];
    let companion = DMatrix::from_fn(deg, deg, |r, c| {
        if r == 0 {
            -p[deg - 1 - c] / lead
        } else if r == c + 1 {
            1.0
        } else {
            0.0
        }
    });
    let dp: Vec<f64> = (1..=deg).map(|k| k as f64 * p[k]).collect();
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..4 {
                let d = eval(&dp, x);
                if d == 0.0 {
                    break;
                }
                x -= eval(&p[..=deg], x) / d;
            }
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_matrix, RigidPose};

    #[test]
    fn quartic_roots() {
        // (x - 1)(x - 2)(x + 3)(x - 0.5)
        let p = mul(
            &mul(&[-1.0, 1.0], &[-2.0, 1.0]),
            &mul(&[3.0, 1.0], &[-0.5, 1.0]),
        );
        let mut r = real_roots(&p);
        r.sort_by(f64::total_cmp);
        let expected = [-3.0, 0.5, 1.0, 2.0];
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(real_roots(&[1.0, 0.0, 1.0]).is_empty());
    }

    #[test]
    fn recovers_a_known_pose() {
        let r = rotation_matrix(&RigidPose::new(0.4, -0.2, 1.1, 0.0, 0.0, 0.0));
        let t = Point3::new(0.1, -0.2, 3.0);
        let world = [
            Point3::new(0.3, -0.1, 0.2),
            Point3::new(-0.4, 0.2, 0.1),
            Point3::new(0.1, 0.4, -0.3),
        ];
        let image = world.map(|x| {
            let c = r * x + t;
            Point2::new(c.x / c.z, c.y / c.z)
        });
        let sols = p3p(world, image);
        assert!(!sols.is_empty());
        assert!(sols
            .iter()
            .any(|(r2, t2)| (r2 - r).amax() < 1e-8 && (t2 - t).amax() < 1e-8));
    }
}
