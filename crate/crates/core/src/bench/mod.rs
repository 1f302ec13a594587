//! Evaluation harness: reconstruction metric tables, retrieval recall,
//! viewpoint accuracy, metric agreement and silhouette audits.
//!
//! Item-level work runs in parallel; results are always collected in item
//! order, so reports are byte-identical across runs and thread counts.

mod audit;
mod retrieval;
mod stats;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    best_threshold, chamfer, emd, iou_with, prepare_iou, voxel_to_cloud, MetricConfig, MetricError,
    VoxelGrid,
};
use crate::pose::{SolveError, SolverConfig};

pub use audit::{audit_alignment, AuditItem, AuditReport, CategoryStat};
pub use retrieval::{
    pose_accuracy, recall_at_k, view_bins, Embedding, RecallReport, Viewpoint, DEFAULT_KS,
};
pub use stats::{pearson, ranks, spearman};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(
        "unpaired items: {missing_pred:?} have no prediction, {missing_gt:?} have no ground truth"
    )]
    MissingPair {
        missing_pred: Vec<String>,
        missing_gt: Vec<String>,
    },
    #[error("lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} items, got {got}")]
    TooFewItems { needed: usize, got: usize },
    #[error("item '{item}' has dimension {got}, expected {expected}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        item: String,
    },
    #[error("{what} {value} out of range")]
    OutOfRangeAngle { what: &'static str, value: f64 },
    #[error("a column has zero variance")]
    ZeroVariance,
    #[error("non-finite input value")]
    NonFinite,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl BenchError {
    pub fn code(&self) -> &'static str {
        match self {
            BenchError::MissingPair { .. } => "MissingPair",
            BenchError::LengthMismatch { .. } => "LengthMismatch",
            BenchError::TooFewItems { .. } => "TooFewItems",
            BenchError::DimensionMismatch { .. } => "DimensionMismatch",
            BenchError::OutOfRangeAngle { .. } => "OutOfRangeAngle",
            BenchError::ZeroVariance => "ZeroVariance",
            BenchError::NonFinite => "NonFinite",
            BenchError::InvalidArgument(_) => "InvalidArgument",
            BenchError::Config(_) => "ConfigError",
            BenchError::Metric(e) => e.code(),
            BenchError::Solve(e) => e.code(),
            BenchError::Io { .. } => "IoError",
        }
    }
}

/// Solver and metric settings, as read from a TOML file with optional
/// `[solver]` and `[metrics]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub solver: SolverConfig,
    pub metrics: MetricConfig,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let c: Self = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        c.solver.validate()?;
        c.metrics.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub item_id: String,
    pub iou: f64,
    pub cd: f64,
    pub emd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedItem {
    pub item_id: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_items: usize,
    pub mean_iou: f64,
    pub mean_cd: f64,
    pub mean_emd: f64,
    /// Threshold shared by all predictions, picked to maximize mean IoU.
    pub chosen_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_item: Vec<ItemScores>,
    pub failed: Vec<FailedItem>,
    pub aggregate: Option<Aggregate>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>8} {:>10} {:>10}\n", "item", "IoU", "CD", "EMD");
        for r in &self.per_item {
            s += &format!(
                "{:<24} {:>8.4} {:>10.6} {:>10.6}\n",
                r.item_id, r.iou, r.cd, r.emd
            );
        }
        if let Some(a) = &self.aggregate {
            s += &format!(
                "{:<24} {:>8.4} {:>10.6} {:>10.6}\nthreshold {:.2} over {} items\n",
                "mean", a.mean_iou, a.mean_cd, a.mean_emd, a.chosen_threshold, a.n_items
            );
        }
        for f in &self.failed {
            s += &format!("FAILED {} [{}]: {}\n", f.item_id, f.code, f.message);
        }
        s
    }
}

type GridPair = (VoxelGrid, VoxelGrid);

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Surface-sampling seed of one item. Prediction and ground truth of an item
/// share it, so identical grids give identical clouds.
pub fn item_seed(rng_seed: u64, item_id: &str) -> u64 {
    // SplitMix64 finalizer over the combined value.
    let mut z = rng_seed ^ fnv1a(item_id.as_bytes());
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Prepared {
    id: String,
    iou_pair: (VoxelGrid, VoxelGrid),
    cd: f64,
    emd: f64,
}

fn prepare_item(
    id: &str,
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    config: &MetricConfig,
) -> Result<Prepared, MetricError> {
    let iou_pair = (prepare_iou(pred, config)?, prepare_iou(gt, config)?);
    let cfg = MetricConfig {
        rng_seed: item_seed(config.rng_seed, id),
        ..config.clone()
    };
    let (a, b) = (voxel_to_cloud(pred, &cfg)?, voxel_to_cloud(gt, &cfg)?);
    let cd = chamfer(&a, &b)?;
    let (emd, _) = emd(&a, &b, config.emd_epsilon)?;
    Ok(Prepared {
        id: id.into(),
        iou_pair,
        cd,
        emd,
    })
}

/// Scores `(item_id, prediction, ground truth)` triples. IoU uses one
/// binarization threshold for the whole set, swept over the configured
/// range; CD and EMD are computed on normalized surface samples. Items that
/// fail are listed in the report and left out of the aggregate.
pub fn evaluate_grids(
    items: &[(String, VoxelGrid, VoxelGrid)],
    config: &MetricConfig,
) -> Result<EvalReport, BenchError> {
    config.validate()?;
    let results: Vec<Result<Prepared, (String, MetricError)>> = items
        .par_iter()
        .map(|(id, p, g)| prepare_item(id, p, g, config).map_err(|e| (id.clone(), e)))
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(p) => ok.push(p),
            Err((item_id, e)) => {
                log::warn!("item {item_id} failed: {e}");
                failed.push(FailedItem {
                    item_id,
                    code: e.code().into(),
                    message: e.to_string(),
                })
            }
        }
    }
    if ok.is_empty() {
        return Ok(EvalReport {
            per_item: Vec::new(),
            failed,
            aggregate: None,
        });
    }
    let pairs: Vec<(VoxelGrid, VoxelGrid)> = ok.iter().map(|p| p.iou_pair.clone()).collect();
    let (threshold, _) = best_threshold(&pairs, config)?;
    let per_item: Vec<ItemScores> = ok
        .iter()
        .map(|p| {
            let (pred, gt) = &p.iou_pair;
            let iou = iou_with(
                pred,
                threshold,
                gt,
                config.gt_threshold.unwrap_or(threshold),
            )?;
            Ok(ItemScores {
                item_id: p.id.clone(),
                iou,
                cd: p.cd,
                emd: p.emd,
            })
        })
        .collect::<Result<_, MetricError>>()?;
    let n = per_item.len() as f64;
    let mean = |f: fn(&ItemScores) -> f64| per_item.iter().map(f).sum::<f64>() / n;
    let aggregate = Aggregate {
        n_items: per_item.len(),
        mean_iou: mean(|r| r.iou),
        mean_cd: mean(|r| r.cd),
        mean_emd: mean(|r| r.emd),
        chosen_threshold: threshold,
    };
    Ok(EvalReport {
        per_item,
        failed,
        aggregate: Some(aggregate),
    })
}

fn grid_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, BenchError> {
    let io = |source| BenchError::Io {
        path: dir.into(),
        source,
    };
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if matches!(ext, Some("voxf") | Some("binvox")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// [`evaluate_grids`] over two directories of `.voxf`/`.binvox` files,
/// paired by file stem. Every item must appear on both sides. A file that
/// fails to load marks its item failed.
pub fn evaluate_reconstructions(
    pred_dir: &Path,
    gt_dir: &Path,
    config: &MetricConfig,
) -> Result<EvalReport, BenchError> {
    let (pred, gt) = (grid_files(pred_dir)?, grid_files(gt_dir)?);
    let missing_pred: Vec<String> = gt
        .keys()
        .filter(|k| !pred.contains_key(*k))
        .cloned()
        .collect();
    let missing_gt: Vec<String> = pred
        .keys()
        .filter(|k| !gt.contains_key(*k))
        .cloned()
        .collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() || pred.is_empty() {
        return Err(BenchError::MissingPair {
            missing_pred,
            missing_gt,
        });
    }
    let loaded: Vec<(String, Result<GridPair, MetricError>)> = pred
        .par_iter()
        .map(|(id, p)| {
            (
                id.clone(),
                VoxelGrid::load(p).and_then(|p| Ok((p, VoxelGrid::load(&gt[id])?))),
            )
        })
        .collect();
    let mut items = Vec::new();
    let mut load_failures = Vec::new();
    for (id, r) in loaded {
        match r {
            Ok((p, g)) => items.push((id, p, g)),
            Err(e) => load_failures.push(FailedItem {
                item_id: id,
                code: e.code().into(),
                message: e.to_string(),
            }),
        }
    }
    let mut report = evaluate_grids(&items, config)?;
    report.failed.extend(load_failures);
    report.failed.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok(report)
}
