use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapealign::geometry::{compose, Point3, TriangleMesh};
use shapealign::pose::{solve, SolveMethod, SolverConfig};
use shapealign::silhouette::{mask_iou, render_silhouette};
use shapealign::synth::{box_mesh, model_keypoints, prism_mesh, random_pose, DEFAULT_IMAGE};

/// Splits every face at the midpoint of the edge chosen by `pick`.
fn split_faces(mesh: &TriangleMesh, pick: &[usize]) -> TriangleMesh {
    let mut vertices = mesh.vertices().to_vec();
    let mut faces = Vec::new();
    for (i, f) in mesh.faces().iter().enumerate() {
        let k = pick[i % pick.len()] % 3;
        let (a, b, c) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
        let m: Point3 = (vertices[a] + vertices[b]) / 2.0;
        vertices.push(m);
        let mi = vertices.len() - 1;
        faces.push([a, mi, c]);
        faces.push([mi, b, c]);
    }
    TriangleMesh::new(vertices, faces).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splitting_faces_keeps_the_silhouette(seed in 0u64..10_000, pick in prop::collection::vec(0usize..3, 1..12)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = if seed % 2 == 0 { box_mesh(1.0, 0.8, 0.6) } else { prism_mesh(1.0, 0.9, 0.7) };
        let focal = 700.0;
        let p = compose(&DEFAULT_IMAGE.intrinsics(focal).unwrap(), &random_pose(&mut rng, focal, DEFAULT_IMAGE));
        let (w, h) = (DEFAULT_IMAGE.width as usize, DEFAULT_IMAGE.height as usize);
        let whole = render_silhouette(&mesh, &p, w, h).unwrap();
        let split = render_silhouette(&split_faces(&mesh, &pick), &p, w, h).unwrap();
        prop_assume!(whole.count() > 0);
        let iou = mask_iou(&whole, &split).unwrap();
        prop_assert!(iou > 0.999, "IoU {}", iou);
    }
}

#[test]
fn solved_pose_reproduces_the_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = SolverConfig::default();
    let (w, h) = (DEFAULT_IMAGE.width as usize, DEFAULT_IMAGE.height as usize);
    for mesh in [
        box_mesh(1.0, 0.7, 0.9),
        prism_mesh(1.1, 0.8, 0.6),
        box_mesh(0.5, 1.2, 0.8),
    ] {
        let focal = 900.0;
        let truth = compose(
            &DEFAULT_IMAGE.intrinsics(focal).unwrap(),
            &random_pose(&mut rng, focal, DEFAULT_IMAGE),
        );
        let kp3d = model_keypoints(&mesh);
        let kp2d = shapealign::geometry::project_all(&truth, &kp3d).unwrap();
        let mask = render_silhouette(&mesh, &truth, w, h).unwrap();

        let t = shapealign::pose::AnnotationTriple::single(kp2d);
        let sol = solve(SolveMethod::Plain, &kp3d, &t, DEFAULT_IMAGE, &cfg).unwrap();
        let rendered =
            render_silhouette(&mesh, &sol.projection(DEFAULT_IMAGE).unwrap(), w, h).unwrap();
        let iou = mask_iou(&mask, &rendered).unwrap();
        assert!(iou > 0.99, "IoU {iou}");
    }
}
