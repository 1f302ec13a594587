//! Recall@K over clustered embeddings, binned viewpoint accuracy and rank
//! correlation between two metrics.
//!
//! cargo run --example retrieval_and_stats

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapealign::bench::{
    pearson, pose_accuracy, recall_at_k, spearman, Embedding, Viewpoint, DEFAULT_KS,
};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let embeddings: Vec<Embedding> = (0..80)
        .map(|i| {
            let s = i % centers.len();
            Embedding {
                item_id: format!("img{i}"),
                vector: centers[s]
                    .iter()
                    .map(|c| c + rng.random_range(-0.6..0.6))
                    .collect(),
                shape_id: format!("shape{s}"),
            }
        })
        .collect();
    let r = recall_at_k(&embeddings, &DEFAULT_KS).unwrap();
    for (k, v) in &r.recall {
        println!("R@{k:<2} {v:.3}");
    }

    let truth: Vec<Viewpoint> = (0..200)
        .map(|_| Viewpoint {
            azimuth: rng.random_range(0.0..360.0),
            elevation: rng.random_range(-60.0..60.0),
        })
        .collect();
    let pred: Vec<Viewpoint> = truth
        .iter()
        .map(|v| Viewpoint {
            azimuth: (v.azimuth + rng.random_range(-10.0..10.0)).rem_euclid(360.0),
            elevation: v.elevation,
        })
        .collect();
    let (az, el) = pose_accuracy(&pred, &truth, 24, 12).unwrap();
    println!("azimuth accuracy {az:.3}, elevation accuracy {el:.3}");

    let human = [4.0, 2.0, 5.0, 1.0, 3.0, 6.0];
    let metric = [0.71, 0.40, 0.88, 0.35, 0.52, 0.80];
    println!(
        "spearman {:.3}, pearson {:.3}",
        spearman(&human, &metric).unwrap(),
        pearson(&human, &metric).unwrap()
    );
}
