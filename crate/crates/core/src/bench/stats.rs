//! Agreement statistics between two metric columns.

use super::BenchError;

fn check(a: &[f64], b: &[f64]) -> Result<(), BenchError> {
    if a.len() != b.len() {
        return Err(BenchError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(BenchError::TooFewItems {
            needed: 2,
            got: a.len(),
        });
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(BenchError::NonFinite);
    }
    Ok(())
}

fn correlation(a: &[f64], b: &[f64]) -> Result<f64, BenchError> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(BenchError::ZeroVariance);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, BenchError> {
    check(a, b)?;
    correlation(a, b)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

/// Spearman's rank correlation: Pearson correlation of the rank vectors.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, BenchError> {
    check(a, b)?;
    correlation(&ranks(a), &ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&a, &a).unwrap(), 1.0);
        let rev: Vec<f64> = a.iter().rev().cloned().collect();
        assert_eq!(spearman(&a, &rev).unwrap(), -1.0);
        // Σd² = 4 over n = 5: 1 − 6·4 / (5·24).
        let r = spearman(&a, &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert_eq!(r, 0.8);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
        assert_eq!(ranks(&[5.0; 3]), vec![2.0; 3]);
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let affine: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&a, &affine).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // Means 2 and 7/3; Σdxdy = 3, Σdx² = 2, Σdy² = 14/3.
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        let oracle = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        assert!((r - oracle).abs() < 1e-12);
        assert!((r - 0.982).abs() < 1e-3);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0]),
            Err(BenchError::LengthMismatch { .. })
        ));
        assert!(matches!(
            spearman(&[1.0], &[1.0]),
            Err(BenchError::TooFewItems { .. })
        ));
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(BenchError::ZeroVariance)
        ));
        assert!(matches!(
            spearman(&[2.0, 2.0], &[1.0, 2.0]),
            Err(BenchError::ZeroVariance)
        ));
        assert!(matches!(
            pearson(&[f64::NAN, 1.0], &[1.0, 2.0]),
            Err(BenchError::NonFinite)
        ));
    }

    proptest! {
        #[test]
        fn invariances(
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30),
            shift in 0usize..30,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
            let Ok(s) = spearman(&a, &b) else { return Ok(()) };
            let p = pearson(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s) && (-1.0..=1.0).contains(&p));
            // Joint permutation.
            let k = shift % a.len();
            let (mut ra, mut rb) = (a.clone(), b.clone());
            ra.rotate_left(k);
            rb.rotate_left(k);
            prop_assert!((spearman(&ra, &rb).unwrap() - s).abs() < 1e-12);
            prop_assert!((pearson(&ra, &rb).unwrap() - p).abs() < 1e-12);
            // Strictly monotone transforms leave ranks unchanged.
            let ea: Vec<f64> = a.iter().map(|x| (x / 50.0).exp()).collect();
            let cb: Vec<f64> = b.iter().map(|y| -y * y * y).collect();
            prop_assert!((spearman(&ea, &b).unwrap() - s).abs() < 1e-12);
            prop_assert!((spearman(&a, &cb).unwrap() + s).abs() < 1e-12);
        }
    }
}
