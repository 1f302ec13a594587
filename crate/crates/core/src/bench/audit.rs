//! Silhouette audit: how well stored poses explain the annotated masks.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_mesh, AnnotationRecord, DatasetError};
use crate::silhouette::{mask_iou, render_silhouette, BinaryMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditItem {
    pub id: String,
    pub category: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub n: usize,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub items: Vec<AuditItem>,
    pub per_category: BTreeMap<String, CategoryStat>,
    /// Mean over all successfully audited records.
    pub mean_iou: Option<f64>,
    pub n_failed: usize,
}

impl AuditReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<20} {:>6} {:>10}\n", "category", "n", "mask IoU");
        for (c, stat) in &self.per_category {
            s += &format!("{:<20} {:>6} {:>10.4}\n", c, stat.n, stat.mean_iou);
        }
        let n: usize = self.per_category.values().map(|c| c.n).sum();
        s += &format!(
            "{:<20} {:>6} {:>10}\n",
            "all",
            n,
            self.mean_iou.map_or("-".into(), |m| format!("{m:.4}"))
        );
        for item in self.items.iter().filter(|i| i.error.is_some()) {
            s += &format!(
                "FAILED {}: {}\n",
                item.id,
                item.error.as_deref().unwrap_or("")
            );
        }
        s
    }
}

fn audit_one(record: &AnnotationRecord, root: &Path) -> Result<f64, String> {
    let p = match record.projection() {
        None => return Err("record has no pose and focal".into()),
        Some(p) => p.map_err(|e| e.to_string())?,
    };
    let mesh = load_mesh(&root.join(&record.model_path)).map_err(|e| e.to_string())?;
    let mask_path = root.join(&record.mask_path);
    let mask = BinaryMask::load(&mask_path)
        .map_err(|e| DatasetError::from(e).to_string() + &format!(" ({})", mask_path.display()))?;
    let (w, h) = (
        record.image_size.width as usize,
        record.image_size.height as usize,
    );
    if (mask.width(), mask.height()) != (w, h) {
        return Err(format!(
            "mask is {}×{}, image is {w}×{h}",
            mask.width(),
            mask.height()
        ));
    }
    let rendered = render_silhouette(&mesh, &p, w, h).map_err(|e| e.to_string())?;
    mask_iou(&rendered, &mask).map_err(|e| e.to_string())
}

/// Renders every record's model with its stored camera and compares the
/// silhouette with the record's mask. Failures are listed per record and do
/// not stop the run.
pub fn audit_alignment(records: &[AnnotationRecord], root: &Path) -> AuditReport {
    let items: Vec<AuditItem> = records
        .par_iter()
        .map(|r| {
            let res = audit_one(r, root);
            AuditItem {
                id: r.id.clone(),
                category: r.category.clone(),
                iou: res.as_ref().ok().copied(),
                error: res.err(),
            }
        })
        .collect();
    let mut sums: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for item in &items {
        if let Some(v) = item.iou {
            let e = sums.entry(item.category.clone()).or_default();
            e.0 += 1;
            e.1 += v;
        }
    }
    let ok: Vec<f64> = items.iter().filter_map(|i| i.iou).collect();
    AuditReport {
        per_category: sums
            .into_iter()
            .map(|(c, (n, s))| {
                (
                    c,
                    CategoryStat {
                        n,
                        mean_iou: s / n as f64,
                    },
                )
            })
            .collect(),
        mean_iou: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
        n_failed: items.len() - ok.len(),
        items,
    }
}
