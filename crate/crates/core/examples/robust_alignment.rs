//! Three annotators, one of them wrong: compare the plain solver on median
//! keypoints with RANSAC and annotator-subset consensus.
//!
//! cargo run --example robust_alignment

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapealign::geometry::{rotation_angle_between, rotation_matrix};
use shapealign::pose::{solve, AnnotationTriple, SolveMethod, SolverConfig};
use shapealign::synth::{add_pixel_noise, corrupt, random_scene};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scene = random_scene(&mut rng, 12);
    let a = add_pixel_noise(&scene.kp2d, 1.0, &mut rng);
    let b = add_pixel_noise(&scene.kp2d, 1.0, &mut rng);
    let wrong = corrupt(&scene.kp2d, 100.0, &mut rng);
    let triple = AnnotationTriple::new(vec![a, wrong, b]).unwrap();
    let cfg = SolverConfig::default();

    for method in [
        SolveMethod::Plain,
        SolveMethod::Ransac,
        SolveMethod::SubsetConsensus,
    ] {
        let sol = solve(method, &scene.kp3d, &triple, scene.image, &cfg).unwrap();
        let rot =
            rotation_angle_between(&rotation_matrix(&sol.pose), &scene.rotation()).to_degrees();
        print!(
            "{method:?}: rotation off by {rot:.3}°, error {:.2} px²",
            sol.error
        );
        if let Some(inliers) = &sol.inliers {
            let from_wrong = inliers.iter().filter(|o| o.annotator == 1).count();
            print!(
                ", {} inliers ({from_wrong} from annotator 1)",
                inliers.len()
            );
        }
        if let Some(subset) = &sol.subset {
            print!(", annotators {subset:?}");
        }
        println!();
    }
}
