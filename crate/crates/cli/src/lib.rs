//! Subcommands of the `shapealign` binary.
//!
//! Every command produces a human-readable table and a JSON document. The
//! JSON is a pure function of the inputs and flags, so reruns are
//! byte-identical.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use shapealign::bench::{
    audit_alignment, evaluate_reconstructions, pearson, pose_accuracy, recall_at_k, spearman,
    BenchConfig, Embedding, Viewpoint, DEFAULT_KS,
};
use shapealign::dataset::{resolve_root, Dataset, DATASET_ROOT_ENV};
use shapealign::geometry::{rotation_angle_between, rotation_matrix};
use shapealign::pose::{solve, SolveMethod};

#[derive(Debug, Parser)]
#[command(
    name = "shapealign",
    version,
    about = "2D-3D alignment and shape metric harness"
)]
pub struct Cli {
    /// TOML file with optional [solver] and [metrics] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Also write the JSON report to this file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct DatasetArg {
    /// Dataset root (directory holding annotations.json).
    #[arg(long, env = DATASET_ROOT_ENV)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Plain,
    Ransac,
    Subset,
}

impl From<MethodArg> for SolveMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Plain => SolveMethod::Plain,
            MethodArg::Ransac => SolveMethod::Ransac,
            MethodArg::Subset => SolveMethod::SubsetConsensus,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CorrKind {
    Spearman,
    Pearson,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the camera of one record from its keypoint annotations.
    Align {
        #[command(flatten)]
        dataset: DatasetArg,
        /// Record id.
        #[arg(long)]
        record: String,
        #[arg(long, value_enum, default_value_t = MethodArg::Plain)]
        method: MethodArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predicted voxel grids against ground truth (IoU, CD, EMD).
    EvalRecon {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        emd_eps: Option<f64>,
    },
    /// Recall@K of embedding retrieval.
    Retrieve {
        /// JSON array of {item_id, vector, shape_id}.
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        k: Vec<usize>,
    },
    /// Binned azimuth and elevation accuracy.
    PoseAcc {
        /// JSON array of {azimuth, elevation} in degrees.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 24)]
        az_bins: usize,
        #[arg(long, default_value_t = 12)]
        el_bins: usize,
    },
    /// Mask IoU between annotated masks and rendered silhouettes.
    Audit {
        #[command(flatten)]
        dataset: DatasetArg,
        /// Rotate every stored pose by this azimuth offset first.
        #[arg(long, default_value_t = 0.0)]
        perturb_azimuth_deg: f64,
    },
    /// Rank or linear correlation of two metric columns.
    Corr {
        /// Numbers, whitespace separated or as a JSON array.
        #[arg(long)]
        metric_a: PathBuf,
        #[arg(long)]
        metric_b: PathBuf,
        #[arg(long, value_enum, default_value_t = CorrKind::Spearman)]
        kind: CorrKind,
    },
    /// Run the annotation HTTP service.
    Serve {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Concurrent solver jobs.
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
}

/// Result of a command: the JSON report, its table rendering, and whether
/// any item failed.
#[derive(Debug)]
pub struct Outcome {
    pub json: String,
    pub table: String,
    pub failed: bool,
}

impl Outcome {
    fn new<T: Serialize>(report: &T, table: String, failed: bool) -> Self {
        let mut json = serde_json::to_string_pretty(report).expect("reports serialize");
        json.push('\n');
        Self {
            json,
            table,
            failed,
        }
    }
}

pub type CliResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read(path)?).map_err(|e| format!("{}: {e}", path.display()).into())
}

/// A column of numbers: a JSON array or whitespace-separated values.
pub fn read_column(path: &Path) -> CliResult<Vec<f64>> {
    let text = read(path)?;
    if text.trim_start().starts_with('[') {
        return read_json(path);
    }
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| format!("{}: bad number '{t}'", path.display()).into())
        })
        .collect()
}

fn load_config(path: Option<&Path>) -> CliResult<BenchConfig> {
    Ok(match path {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    })
}

fn open_dataset(arg: &DatasetArg) -> CliResult<Dataset> {
    let root = resolve_root(arg.dataset.as_deref())?;
    Ok(Dataset::open(&root)?)
}

pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let mut config = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Align {
            dataset,
            record,
            method,
            seed,
        } => {
            if let Some(s) = seed {
                config.solver.rng_seed = *s;
            }
            let ds = open_dataset(dataset)?;
            let r = ds
                .get(record)
                .ok_or_else(|| format!("no record '{record}'"))?;
            let method = SolveMethod::from(*method);
            let sol = solve(
                method,
                &r.keypoints_3d,
                &r.keypoint_annotations,
                r.image_size,
                &config.solver,
            )?;
            let rotation_vs_stored = r.pose.map(|p| {
                rotation_angle_between(&rotation_matrix(&p), &rotation_matrix(&sol.pose))
                    .to_degrees()
            });
            let table = format!(
                "record {record} ({method:?})\nfocal {:.3} px\nerror {:.6e} px²\npose θ={:.4} φ={:.4} ψ={:.4} T=({:.4}, {:.4}, {:.4})\n{}",
                sol.focal,
                sol.error,
                sol.pose.theta,
                sol.pose.phi,
                sol.pose.psi,
                sol.pose.x,
                sol.pose.y,
                sol.pose.z,
                rotation_vs_stored.map_or(String::new(), |d| format!("rotation vs stored pose {d:.4}°\n")),
            );
            let report = json!({
                "record": record,
                "solution": sol,
                "rotation_vs_stored_deg": rotation_vs_stored,
            });
            Ok(Outcome::new(&report, table, false))
        }
        Command::EvalRecon {
            pred,
            gt,
            seed,
            emd_eps,
        } => {
            if let Some(s) = seed {
                config.metrics.rng_seed = *s;
            }
            if let Some(e) = emd_eps {
                config.metrics.emd_epsilon = *e;
            }
            let report = evaluate_reconstructions(pred, gt, &config.metrics)?;
            let failed = !report.failed.is_empty();
            Ok(Outcome::new(&report, report.to_table(), failed))
        }
        Command::Retrieve { embeddings, k } => {
            let e: Vec<Embedding> = read_json(embeddings)?;
            let report = recall_at_k(&e, k)?;
            let mut table = format!(
                "{} queries, {} excluded\n",
                report.n_queries, report.n_excluded
            );
            if report.no_valid_queries {
                table += "no valid queries\n";
            }
            for (k, r) in &report.recall {
                table += &format!("R@{k:<4} {r:.4}\n");
            }
            Ok(Outcome::new(&report, table, false))
        }
        Command::PoseAcc {
            pred,
            truth,
            az_bins,
            el_bins,
        } => {
            let (p, t): (Vec<Viewpoint>, Vec<Viewpoint>) = (read_json(pred)?, read_json(truth)?);
            let (az, el) = pose_accuracy(&p, &t, *az_bins, *el_bins)?;
            let report = json!({
                "n": p.len(),
                "az_bins": az_bins,
                "el_bins": el_bins,
                "azimuth_accuracy": az,
                "elevation_accuracy": el,
            });
            let table =
                format!("azimuth   ({az_bins} bins) {az:.4}\nelevation ({el_bins} bins) {el:.4}\n");
            Ok(Outcome::new(&report, table, false))
        }
        Command::Audit {
            dataset,
            perturb_azimuth_deg,
        } => {
            let ds = open_dataset(dataset)?;
            let mut records = ds.records.clone();
            if *perturb_azimuth_deg != 0.0 {
                for r in &mut records {
                    if let Some(p) = r.pose.as_mut() {
                        p.theta += perturb_azimuth_deg.to_radians();
                    }
                }
            }
            let report = audit_alignment(&records, &ds.root);
            Ok(Outcome::new(
                &report,
                report.to_table(),
                report.n_failed > 0,
            ))
        }
        Command::Corr {
            metric_a,
            metric_b,
            kind,
        } => {
            let (a, b) = (read_column(metric_a)?, read_column(metric_b)?);
            let (name, value) = match kind {
                CorrKind::Spearman => ("spearman", spearman(&a, &b)?),
                CorrKind::Pearson => ("pearson", pearson(&a, &b)?),
            };
            let report = json!({ "kind": name, "n": a.len(), "value": value });
            Ok(Outcome::new(
                &report,
                format!("{name} {value:.6} (n = {})\n", a.len()),
                false,
            ))
        }
        Command::Serve {
            dataset,
            host,
            port,
            workers,
        } => {
            let root = resolve_root(dataset.dataset.as_deref())?;
            let state = shapealign_service::AppState::open(&root, config.solver, *workers)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(shapealign_service::serve(
                Arc::new(state),
                SocketAddr::new(*host, *port),
            ))?;
            Ok(Outcome::new(
                &json!({ "served": root }),
                String::new(),
                false,
            ))
        }
    }
}
