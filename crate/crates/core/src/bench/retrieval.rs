//! Retrieval Recall@K over embeddings and binned viewpoint accuracy.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::BenchError;

/// Latent vector of one test image, labelled with the shape it depicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub item_id: String,
    pub vector: Vec<f64>,
    pub shape_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Recall for each requested K, keyed by K.
    pub recall: BTreeMap<usize, f64>,
    pub n_queries: usize,
    /// Queries skipped because no other item shares their shape.
    pub n_excluded: usize,
    pub no_valid_queries: bool,
}

/// The K set of the usual retrieval tables.
pub const DEFAULT_KS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Recall@K with L2 distance: the fraction of queries whose K nearest
/// neighbours (the query itself excluded) contain at least one item of the
/// same shape. Queries whose shape appears only once are skipped. Distance
/// ties are broken by item index.
pub fn recall_at_k(embeddings: &[Embedding], ks: &[usize]) -> Result<RecallReport, BenchError> {
    if embeddings.len() < 2 {
        return Err(BenchError::TooFewItems {
            needed: 2,
            got: embeddings.len(),
        });
    }
    let dim = embeddings[0].vector.len();
    if let Some(e) = embeddings.iter().find(|e| e.vector.len() != dim) {
        return Err(BenchError::DimensionMismatch {
            expected: dim,
            got: e.vector.len(),
            item: e.item_id.clone(),
        });
    }
    if embeddings
        .iter()
        .any(|e| !e.vector.iter().all(|v| v.is_finite()))
    {
        return Err(BenchError::NonFinite);
    }
    if ks.contains(&0) {
        return Err(BenchError::InvalidArgument("K must be at least 1".into()));
    }
    let mut shape_count: HashMap<&str, usize> = HashMap::new();
    for e in embeddings {
        *shape_count.entry(&e.shape_id).or_default() += 1;
    }
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    // Rank (0-based) of the nearest same-shape neighbour of every valid query.
    let first_hits: Vec<usize> = embeddings
        .iter()
        .enumerate()
        .filter(|(_, q)| shape_count[q.shape_id.as_str()] > 1)
        .map(|(qi, q)| {
            let mut others: Vec<(f64, usize)> = embeddings
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != qi)
                .map(|(i, e)| (dist2(&q.vector, &e.vector), i))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others
                .iter()
                .position(|&(_, i)| embeddings[i].shape_id == q.shape_id)
                .expect("valid query has a same-shape neighbour")
        })
        .collect();

    let n_queries = first_hits.len();
    let recall = ks
        .iter()
        .filter(|_| n_queries > 0)
        .map(|&k| {
            (
                k,
                first_hits.iter().filter(|&&r| r < k).count() as f64 / n_queries as f64,
            )
        })
        .collect();
    Ok(RecallReport {
        recall,
        n_queries,
        n_excluded: embeddings.len() - n_queries,
        no_valid_queries: n_queries == 0,
    })
}

/// Viewpoint as azimuth in `[0, 360)` and elevation in `[-90, 90]`, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub azimuth: f64,
    pub elevation: f64,
}

/// Azimuth bins start at 0° and elevation bins at −90°; every bin is
/// half-open `[lo, hi)`, except that elevation +90° falls in the last bin.
pub fn view_bins(v: Viewpoint, n_az: usize, n_el: usize) -> Result<(usize, usize), BenchError> {
    if !(0.0..360.0).contains(&v.azimuth) {
        return Err(BenchError::OutOfRangeAngle {
            what: "azimuth",
            value: v.azimuth,
        });
    }
    if !(-90.0..=90.0).contains(&v.elevation) {
        return Err(BenchError::OutOfRangeAngle {
            what: "elevation",
            value: v.elevation,
        });
    }
    let az = ((v.azimuth / (360.0 / n_az as f64)).floor() as usize).min(n_az - 1);
    let el = (((v.elevation + 90.0) / (180.0 / n_el as f64)).floor() as usize).min(n_el - 1);
    Ok((az, el))
}

/// Fractions of items whose predicted azimuth and elevation fall in the
/// same bin as the truth.
pub fn pose_accuracy(
    predicted: &[Viewpoint],
    truth: &[Viewpoint],
    n_az_bins: usize,
    n_el_bins: usize,
) -> Result<(f64, f64), BenchError> {
    if predicted.len() != truth.len() {
        return Err(BenchError::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(BenchError::TooFewItems { needed: 1, got: 0 });
    }
    if n_az_bins == 0 || n_el_bins == 0 {
        return Err(BenchError::InvalidArgument(
            "bin counts must be positive".into(),
        ));
    }
    let (mut az_hits, mut el_hits) = (0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        let (pa, pe) = view_bins(*p, n_az_bins, n_el_bins)?;
        let (ta, te) = view_bins(*t, n_az_bins, n_el_bins)?;
        az_hits += (pa == ta) as usize;
        el_hits += (pe == te) as usize;
    }
    let n = predicted.len() as f64;
    Ok((az_hits as f64 / n, el_hits as f64 / n))
}
