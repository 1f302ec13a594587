//! IoU, Chamfer distance and EMD between a voxel prediction and its ground
//! truth, through the surface-sampling pipeline.
//!
//! cargo run --example voxel_metrics

use shapealign::bench::evaluate_grids;
use shapealign::metrics::{chamfer, emd, marching_cubes, voxel_to_cloud, MetricConfig};
use shapealign::synth::{block_grid, sphere_grid};

fn main() {
    let cfg = MetricConfig::default();
    let gt = sphere_grid(32, 10.0);
    let pred = sphere_grid(32, 9.0);

    let mesh = marching_cubes(&gt, cfg.iso_value).unwrap();
    println!(
        "ground truth surface: {} vertices, {} faces, area {:.1}",
        mesh.vertices().len(),
        mesh.faces().len(),
        mesh.surface_area()
    );

    let (a, b) = (
        voxel_to_cloud(&pred, &cfg).unwrap(),
        voxel_to_cloud(&gt, &cfg).unwrap(),
    );
    println!("CD  {:.5}", chamfer(&a, &b).unwrap());
    println!("EMD {:.5}", emd(&a, &b, cfg.emd_epsilon).unwrap().0);

    let items = vec![
        ("sphere".to_string(), pred, gt),
        (
            "block".to_string(),
            block_grid(32, [6, 6, 6], [24, 20, 26]),
            block_grid(32, [6, 6, 6], [24, 22, 26]),
        ),
    ];
    print!("{}", evaluate_grids(&items, &cfg).unwrap().to_table());
}
