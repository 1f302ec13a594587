use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use shapealign::synth::{shape_grid, write_synthetic_dataset};
use tempfile::TempDir;

fn shapealign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapealign"))
        .args(args)
        .env_remove("SHAPEALIGN_DATASET_ROOT")
        .output()
        .expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_grids(dir: &Path, ids: &[usize], shift: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for &i in ids {
        shape_grid(i + shift)
            .save(&dir.join(format!("item{i}.voxf")))
            .unwrap();
    }
}

#[test]
fn align_recovers_the_stored_camera() {
    let tmp = TempDir::new().unwrap();
    let records = write_synthetic_dataset(tmp.path(), 2, 7).unwrap();
    let root = tmp.path().to_str().unwrap();
    for method in ["plain", "ransac", "subset"] {
        let out = shapealign(&[
            "align",
            "--dataset",
            root,
            "--record",
            &records[0].id,
            "--method",
            method,
            "--format",
            "json",
        ]);
        let v = json_of(&out);
        assert!(
            v["solution"]["error"].as_f64().unwrap() < 1e-3,
            "{method}: {v}"
        );
        assert!(
            v["rotation_vs_stored_deg"].as_f64().unwrap() < 0.5,
            "{method}: {v}"
        );
    }
}

#[test]
fn dataset_root_falls_back_to_env() {
    let tmp = TempDir::new().unwrap();
    let records = write_synthetic_dataset(tmp.path(), 1, 3).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_shapealign"))
        .args(["align", "--record", &records[0].id])
        .env("SHAPEALIGN_DATASET_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("focal"));

    let missing = shapealign(&["align", "--record", "x"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let records = write_synthetic_dataset(&tmp.path().join("ds"), 2, 11).unwrap();
    let ds = tmp.path().join("ds");
    let ds = ds.to_str().unwrap();
    write_grids(&tmp.path().join("pred"), &[0, 1, 2], 0);
    write_grids(&tmp.path().join("gt"), &[0, 1, 2], 0);
    let pred = tmp.path().join("pred");
    let gt = tmp.path().join("gt");
    let runs: Vec<Vec<&str>> = vec![
        vec![
            "align",
            "--dataset",
            ds,
            "--record",
            &records[1].id,
            "--method",
            "ransac",
            "--seed",
            "5",
        ],
        vec![
            "eval-recon",
            "--pred",
            pred.to_str().unwrap(),
            "--gt",
            gt.to_str().unwrap(),
            "--seed",
            "9",
        ],
        vec!["audit", "--dataset", ds],
    ];
    for args in runs {
        let mut with_json = args.clone();
        with_json.extend(["--format", "json"]);
        let a = shapealign(&with_json);
        let b = shapealign(&with_json);
        assert!(
            a.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&a.stderr)
        );
        assert_eq!(a.stdout, b.stdout, "{args:?}");
    }
}

#[test]
fn eval_recon_scores_identical_grids_perfectly() {
    let tmp = TempDir::new().unwrap();
    write_grids(&tmp.path().join("pred"), &[0, 1, 2, 3], 0);
    write_grids(&tmp.path().join("gt"), &[0, 1, 2, 3], 0);
    let report = tmp.path().join("report.json");
    let out = shapealign(&[
        "eval-recon",
        "--pred",
        tmp.path().join("pred").to_str().unwrap(),
        "--gt",
        tmp.path().join("gt").to_str().unwrap(),
        "--format",
        "json",
        "--out",
        report.to_str().unwrap(),
    ]);
    let v = json_of(&out);
    assert_eq!(std::fs::read(&report).unwrap(), out.stdout);
    let agg = &v["aggregate"];
    assert_eq!(agg["n_items"], 4);
    assert_eq!(agg["mean_iou"].as_f64().unwrap(), 1.0);
    assert_eq!(agg["chosen_threshold"].as_f64().unwrap(), 0.01);
    assert!(agg["mean_cd"].as_f64().unwrap() < 1e-3);
    assert!(agg["mean_emd"].as_f64().unwrap() < 2e-3);
}

#[test]
fn eval_recon_reports_failures_with_nonzero_exit() {
    let tmp = TempDir::new().unwrap();
    write_grids(&tmp.path().join("pred"), &[0, 1], 0);
    write_grids(&tmp.path().join("gt"), &[0, 1], 0);
    shapealign::metrics::VoxelGrid::zeros([32, 32, 32])
        .save(&tmp.path().join("pred/item1.voxf"))
        .unwrap();
    let out = shapealign(&[
        "eval-recon",
        "--pred",
        tmp.path().join("pred").to_str().unwrap(),
        "--gt",
        tmp.path().join("gt").to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["failed"][0]["item_id"], "item1");
    assert_eq!(v["aggregate"]["n_items"], 1);

    std::fs::remove_file(tmp.path().join("gt/item0.voxf")).unwrap();
    let unpaired = shapealign(&[
        "eval-recon",
        "--pred",
        tmp.path().join("pred").to_str().unwrap(),
        "--gt",
        tmp.path().join("gt").to_str().unwrap(),
    ]);
    assert_eq!(unpaired.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unpaired.stderr).contains("item0"));
}

#[test]
fn retrieve_reads_embeddings() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("emb.json");
    let emb = serde_json::json!([
        {"item_id": "a", "vector": [0.0, 0.0], "shape_id": "s1"},
        {"item_id": "b", "vector": [0.1, 0.0], "shape_id": "s1"},
        {"item_id": "c", "vector": [5.0, 5.0], "shape_id": "s2"},
        {"item_id": "d", "vector": [5.0, 5.1], "shape_id": "s3"},
    ]);
    std::fs::write(&path, emb.to_string()).unwrap();
    let v = json_of(&shapealign(&[
        "retrieve",
        "--embeddings",
        path.to_str().unwrap(),
        "--k",
        "1,2",
        "--format",
        "json",
    ]));
    assert_eq!(v["n_queries"], 2);
    assert_eq!(v["n_excluded"], 2);
    assert_eq!(v["recall"]["1"].as_f64().unwrap(), 1.0);
}

#[test]
fn pose_acc_bins_viewpoints() {
    let tmp = TempDir::new().unwrap();
    let pred = tmp.path().join("pred.json");
    let truth = tmp.path().join("truth.json");
    std::fs::write(
        &pred,
        r#"[{"azimuth": 1.0, "elevation": 1.0}, {"azimuth": 100.0, "elevation": -40.0}]"#,
    )
    .unwrap();
    std::fs::write(
        &truth,
        r#"[{"azimuth": 2.0, "elevation": 2.0}, {"azimuth": 10.0, "elevation": -40.0}]"#,
    )
    .unwrap();
    let v = json_of(&shapealign(&[
        "pose-acc",
        "--pred",
        pred.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--format",
        "json",
    ]));
    assert_eq!(v["azimuth_accuracy"].as_f64().unwrap(), 0.5);
    assert_eq!(v["elevation_accuracy"].as_f64().unwrap(), 1.0);
}

#[test]
fn corr_accepts_both_column_formats() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.txt");
    let b = tmp.path().join("b.json");
    std::fs::write(&a, "1 2 3\n4 5\n").unwrap();
    std::fs::write(&b, "[2, 1, 4, 3, 5]").unwrap();
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    let v = json_of(&shapealign(&[
        "corr",
        "--metric-a",
        a,
        "--metric-b",
        b,
        "--format",
        "json",
    ]));
    assert_eq!(v["value"].as_f64().unwrap(), 0.8);
    let p = json_of(&shapealign(&[
        "corr",
        "--metric-a",
        a,
        "--metric-b",
        b,
        "--kind",
        "pearson",
        "--format",
        "json",
    ]));
    assert_eq!(p["value"].as_f64().unwrap(), 0.8);

    let short = tmp.path().join("short.txt");
    std::fs::write(&short, "1 2").unwrap();
    let out = shapealign(&[
        "corr",
        "--metric-a",
        a,
        "--metric-b",
        short.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn audit_detects_azimuth_perturbation() {
    let tmp = TempDir::new().unwrap();
    write_synthetic_dataset(tmp.path(), 4, 21).unwrap();
    let root = tmp.path().to_str().unwrap();
    let clean = json_of(&shapealign(&[
        "audit",
        "--dataset",
        root,
        "--format",
        "json",
    ]));
    let off = json_of(&shapealign(&[
        "audit",
        "--dataset",
        root,
        "--perturb-azimuth-deg",
        "10",
        "--format",
        "json",
    ]));
    let (c, o) = (
        clean["mean_iou"].as_f64().unwrap(),
        off["mean_iou"].as_f64().unwrap(),
    );
    assert!(c > 0.99, "{c}");
    assert!(o < c, "{o} !< {c}");
}

#[test]
fn config_file_overrides_defaults() {
    let tmp = TempDir::new().unwrap();
    write_grids(&tmp.path().join("pred"), &[0], 0);
    write_grids(&tmp.path().join("gt"), &[0], 0);
    let cfg = tmp.path().join("bench.toml");
    std::fs::write(
        &cfg,
        "[metrics]\nthreshold_min = 0.3\nthreshold_max = 0.3\n",
    )
    .unwrap();
    let v = json_of(&shapealign(&[
        "eval-recon",
        "--config",
        cfg.to_str().unwrap(),
        "--pred",
        tmp.path().join("pred").to_str().unwrap(),
        "--gt",
        tmp.path().join("gt").to_str().unwrap(),
        "--format",
        "json",
    ]));
    assert_eq!(v["aggregate"]["chosen_threshold"].as_f64().unwrap(), 0.3);

    std::fs::write(&cfg, "[metrics]\nbogus = 1\n").unwrap();
    let out = shapealign(&[
        "eval-recon",
        "--config",
        cfg.to_str().unwrap(),
        "--pred",
        "x",
        "--gt",
        "y",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
