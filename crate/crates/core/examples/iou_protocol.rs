//! Trace what the IoU preparation does to a 128³ grid and print the
//! threshold curve of a slightly shifted prediction.
//!
//! cargo run --example iou_protocol

use shapealign::metrics::{
    best_threshold, prepare_iou, prepare_iou_traced, threshold_curve, MetricConfig,
};
use shapealign::synth::block_grid;

fn main() {
    let cfg = MetricConfig::default();
    let gt = block_grid(128, [16, 32, 40], [96, 80, 112]);
    let pred = block_grid(128, [20, 32, 40], [100, 84, 112]);

    let (_, trace) = prepare_iou_traced(&gt, &cfg).unwrap();
    println!("{}", serde_json::to_string_pretty(&trace).unwrap());

    let pair = (
        prepare_iou(&pred, &cfg).unwrap(),
        prepare_iou(&gt, &cfg).unwrap(),
    );
    let curve = threshold_curve(std::slice::from_ref(&pair), &cfg).unwrap();
    for (t, iou) in curve.iter().step_by(7) {
        println!("t = {t:.2}  IoU {iou:.4}");
    }
    let (t, iou) = best_threshold(&[pair], &cfg).unwrap();
    println!("best threshold {t:.2} with IoU {iou:.4}");
}
