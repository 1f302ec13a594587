//! Load an annotation document, filter it, fix a pose and save it back.
//!
//! cargo run --example dataset_roundtrip [DATASET_ROOT]
//!
//! Without an argument a synthetic dataset is written to a temporary
//! directory first.

use shapealign::dataset::{filter, Dataset, RecordFilter};
use shapealign::pose::{solve, SolveMethod, SolverConfig};
use shapealign::synth::write_synthetic_dataset;

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            write_synthetic_dataset(tmp.path(), 4, 9).unwrap();
            tmp.path().to_path_buf()
        }
    };
    let mut ds = Dataset::open(&root).unwrap();
    for w in &ds.warnings {
        println!("warning: {w:?}");
    }
    let cubes = filter(&ds.records, |r| RecordFilter::clean("cube").matches(r));
    println!("{} records, {} clean cubes", ds.records.len(), cubes.len());

    let cfg = SolverConfig::default();
    for r in &mut ds.records {
        let sol = solve(
            SolveMethod::Plain,
            &r.keypoints_3d,
            &r.keypoint_annotations,
            r.image_size,
            &cfg,
        )
        .unwrap();
        r.pose = Some(sol.pose);
        r.focal = Some(sol.focal);
        r.version += 1;
        println!(
            "{:<10} focal {:8.2}  error {:.2e}",
            r.id, sol.focal, sol.error
        );
    }
    ds.save().unwrap();
    let reloaded = Dataset::open(&root).unwrap();
    assert_eq!(reloaded.records, ds.records);
    println!("saved {}", reloaded.annotation_path().display());
}
