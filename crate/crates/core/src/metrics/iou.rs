//! Voxel IoU with the resampling protocol: optional 4× max pooling, tight
//! bounding box, pad to a cube, trilinear resample to a fixed resolution,
//! then a threshold sweep shared by all items.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MetricConfig, MetricError, VoxelGrid};

/// Inputs whose longest side reaches this size are max-pooled first.
pub const POOL_TRIGGER: usize = 128;
pub const POOL_FACTOR: usize = 4;

/// What [`prepare_iou_traced`] did to its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouTrace {
    pub input_dims: [usize; 3],
    /// Dimensions after max pooling, when pooling was applied.
    pub pooled_dims: Option<[usize; 3]>,
    /// Inclusive cell bounds of values above the bbox threshold, in the
    /// (pooled) grid.
    pub bbox_min: [usize; 3],
    pub bbox_max: [usize; 3],
    /// Lowest corner of the padded cube; may be negative or reach past the
    /// grid, where values read as zero.
    pub cube_origin: [i64; 3],
    pub cube_side: usize,
    pub output_dims: [usize; 3],
}

/// Resamples `grid` onto the `iou_resolution³` comparison grid.
pub fn prepare_iou(grid: &VoxelGrid, config: &MetricConfig) -> Result<VoxelGrid, MetricError> {
    prepare_iou_traced(grid, config).map(|(g, _)| g)
}

pub fn prepare_iou_traced(
    grid: &VoxelGrid,
    config: &MetricConfig,
) -> Result<(VoxelGrid, IouTrace), MetricError> {
    config.validate()?;
    let input_dims = grid.dims();
    let pooled;
    let (src, pooled_dims) = if input_dims.iter().copied().max().unwrap_or(0) >= POOL_TRIGGER {
        pooled = grid.max_pool(POOL_FACTOR);
        (&pooled, Some(pooled.dims()))
    } else {
        (grid, None)
    };

    let [nx, ny, nz] = src.dims();
    let threshold = config.iou_bbox_threshold as f32;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if src.get(x, y, z) > threshold {
                    let p = [x, y, z];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(MetricError::EmptyGrid);
    }

    let extent: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
    let side = extent.into_iter().max().unwrap();
    // Even split of the padding; the odd cell goes to the high side.
    let origin: [i64; 3] = std::array::from_fn(|a| lo[a] as i64 - ((side - extent[a]) / 2) as i64);

    let r = config.iou_resolution;
    let scale = side as f64 / r as f64;
    // Source coordinate of each output index along one axis, clamped to the
    // cube's cell centers.
    let coords: Vec<f64> = (0..r)
        .map(|i| ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64))
        .collect();
    let sample = |a: usize, i: usize| {
        let c = coords[i];
        let f = c.floor();
        let base = origin[a] + f as i64;
        (base, base + 1, c - f)
    };
    let out = VoxelGrid::from_fn([r, r, r], |x, y, z| {
        let (x0, x1, tx) = sample(0, x);
        let (y0, y1, ty) = sample(1, y);
        let (z0, z1, tz) = sample(2, z);
        let v = |xx, yy, zz| src.get_or_zero(xx, yy, zz) as f64;
        let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
        let c00 = lerp(v(x0, y0, z0), v(x1, y0, z0), tx);
        let c10 = lerp(v(x0, y1, z0), v(x1, y1, z0), tx);
        let c01 = lerp(v(x0, y0, z1), v(x1, y0, z1), tx);
        let c11 = lerp(v(x0, y1, z1), v(x1, y1, z1), tx);
        lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz) as f32
    });
    let trace = IouTrace {
        input_dims,
        pooled_dims,
        bbox_min: lo,
        bbox_max: hi,
        cube_origin: origin,
        cube_side: side,
        output_dims: out.dims(),
    };
    Ok((out, trace))
}

/// Counts of (intersection, union) after binarizing `a` at `ta` and `b` at
/// `tb` (a cell is occupied when its value is at least the threshold).
fn overlap(a: &VoxelGrid, ta: f64, b: &VoxelGrid, tb: f64) -> (usize, usize) {
    let (ta, tb) = (ta as f32, tb as f32);
    a.values()
        .iter()
        .zip(b.values())
        .fold((0, 0), |(i, u), (&va, &vb)| {
            let (oa, ob) = (va >= ta, vb >= tb);
            (i + (oa && ob) as usize, u + (oa || ob) as usize)
        })
}

fn ratio((inter, union): (usize, usize)) -> f64 {
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of the two grids binarized at `threshold`. Two empty binarizations
/// give 0.
pub fn iou(a: &VoxelGrid, b: &VoxelGrid, threshold: f64) -> Result<f64, MetricError> {
    iou_with(a, threshold, b, threshold)
}

/// IoU with separate thresholds for the two grids.
pub fn iou_with(a: &VoxelGrid, ta: f64, b: &VoxelGrid, tb: f64) -> Result<f64, MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::ResolutionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    Ok(ratio(overlap(a, ta, b, tb)))
}

/// Mean IoU of every (prediction, ground truth) pair at each swept threshold,
/// in sweep order.
pub fn threshold_curve(
    pairs: &[(VoxelGrid, VoxelGrid)],
    config: &MetricConfig,
) -> Result<Vec<(f64, f64)>, MetricError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if let Some((p, g)) = pairs.iter().find(|(p, g)| p.dims() != g.dims()) {
        return Err(MetricError::ResolutionMismatch {
            left: p.dims(),
            right: g.dims(),
        });
    }
    let thresholds = config.thresholds();
    // Per pair, per threshold; summed over pairs in index order.
    let per_pair: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|(pred, gt)| {
            thresholds
                .iter()
                .map(|&t| ratio(overlap(pred, t, gt, config.gt_threshold.unwrap_or(t))))
                .collect()
        })
        .collect();
    Ok(thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let sum: f64 = per_pair.iter().map(|row| row[k]).sum();
            (t, sum / pairs.len() as f64)
        })
        .collect())
}

/// The swept threshold maximizing mean IoU over all pairs (lowest threshold
/// on ties), with that mean.
pub fn best_threshold(
    pairs: &[(VoxelGrid, VoxelGrid)],
    config: &MetricConfig,
) -> Result<(f64, f64), MetricError> {
    let curve = threshold_curve(pairs, config)?;
    Ok(curve
        .into_iter()
        .fold(None::<(f64, f64)>, |best, (t, m)| match best {
            Some((_, bm)) if m <= bm => best,
            _ => Some((t, m)),
        })
        .expect("sweep is nonempty"))
}
