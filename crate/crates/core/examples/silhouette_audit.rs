//! Write a small synthetic dataset, audit its stored poses against the
//! masks, then audit again after turning every pose by a few degrees.
//!
//! cargo run --example silhouette_audit

use shapealign::bench::audit_alignment;
use shapealign::dataset::Dataset;
use shapealign::silhouette::outline;
use shapealign::synth::write_synthetic_dataset;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 6, 3).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();

    let mask = ds.load_mask(&ds.records[0]).unwrap();
    let rings = outline(&mask);
    println!(
        "{}: {} mask pixels, outline of {} vertices",
        ds.records[0].id,
        mask.count(),
        rings[0].len()
    );

    print!("{}", audit_alignment(&ds.records, &ds.root).to_table());
    for deg in [2.0f64, 5.0, 10.0] {
        let mut turned = ds.records.clone();
        for r in &mut turned {
            r.pose.as_mut().unwrap().theta += deg.to_radians();
        }
        let mean = audit_alignment(&turned, &ds.root).mean_iou.unwrap();
        println!("azimuth +{deg:>4}°  mean mask IoU {mean:.4}");
    }
}
