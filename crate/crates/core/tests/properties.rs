//! Randomized invariants across the core modules.

use motionfield::baselines::BoneCloudParams;
use motionfield::geometry::{brute_force_nearest, points_to_tensor, KdTree, Mesh, Point3, PointSet};
use motionfield::losses::{aiap, chamfer, chamfer_exhaustive, charbonnier, NeighborGraph, AIAP_K};
use motionfield::motion::{normalize_time, MotionModel, Variant};
use motionfield::siren::init_siren;
use motionfield::synth::{decode_trajectories, encode_trajectories, gen_elemental, Motion, MotionKind};
use motionfield::tensor::Tensor;
use proptest::prelude::*;

fn point(scale: f64) -> impl Strategy<Value = Point3> {
    [-scale..scale, -scale..scale, -scale..scale]
}

fn cloud(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(point(2.0), n)
}

fn rotation(axis: Point3, angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt().max(1e-9);
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn apply(r: &[[f64; 3]; 3], p: &Point3, b: &Point3) -> Point3 {
    [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + b[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kd_nearest_agrees_with_scan(pts in cloud(1..120), qs in prop::collection::vec(point(3.0), 1..20)) {
        let tree = KdTree::build(&pts).unwrap();
        for q in &qs {
            prop_assert_eq!(tree.nearest(q), brute_force_nearest(&pts, q));
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_exact(a in cloud(1..80), b in cloud(1..80)) {
        let (a, b) = (PointSet::new(a), PointSet::new(b));
        let ab = chamfer(&a, &b, false).unwrap().cd;
        prop_assert!((ab - chamfer(&b, &a, false).unwrap().cd).abs() <= 1e-12);
        prop_assert!((ab - chamfer_exhaustive(&a, &b, false).unwrap().cd).abs() <= 1e-12);
        prop_assert_eq!(chamfer(&a, &a, false).unwrap().cd, 0.0);
    }

    #[test]
    fn aiap_ignores_rigid_motion(
        pts in cloud(8..60),
        warp in cloud(60..61),
        axis in point(1.0),
        angle in -3.2f64..3.2,
        shift in point(5.0),
    ) {
        let g = NeighborGraph::build(&pts, AIAP_K.min(pts.len() - 1)).unwrap();
        let warped: Vec<Point3> = pts.iter().zip(&warp).map(|(p, w)| [0, 1, 2].map(|i| p[i] + 0.1 * w[i])).collect();
        let r = rotation(axis, angle);
        let moved: Vec<Point3> = warped.iter().map(|p| apply(&r, p, &shift)).collect();
        let (before, after) = (aiap(&warped, &g), aiap(&moved, &g));
        prop_assert!((before - after).abs() <= 1e-10 * before.max(1.0), "{} vs {}", before, after);
        let rigid: Vec<Point3> = pts.iter().map(|p| apply(&r, p, &shift)).collect();
        prop_assert!(aiap(&rigid, &g) <= 1e-12);
    }

    #[test]
    fn charbonnier_never_exceeds_its_argument(s2 in 0.0f64..1e6) {
        prop_assert!(charbonnier(s2) <= s2);
        prop_assert!(charbonnier(s2) >= 0.0);
    }

    #[test]
    fn bone_weights_partition_unity(bones in cloud(1..40), qs in cloud(1..30), sigma in 0.5f64..20.0) {
        let p = BoneCloudParams::<f64>::new(&bones, 3, sigma).unwrap();
        let w = p.weights(&points_to_tensor(&qs)).unwrap();
        let k = bones.len();
        for i in 0..qs.len() {
            let s: f64 = w.data()[i * k..(i + 1) * k].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn elemental_steps_compose(kind in 0usize..4, m in -3.0f64..3.0, a in 0.0f64..0.5, b in 0.0f64..0.5) {
        let kind = [MotionKind::Translation, MotionKind::Rotation, MotionKind::Scaling, MotionKind::Shearing][kind];
        let motion = Motion::new(kind, m).unwrap();
        let (ta, tb, tab) = (motion.at(a), motion.at(b), motion.at(a + b));
        if kind == MotionKind::Scaling {
            // factors are affine in the step: (f(a) − 1) + (f(b) − 1) = f(a + b) − 1
            for i in 0..3 {
                prop_assert!((ta.a[i][i] + tb.a[i][i] - 1.0 - tab.a[i][i]).abs() <= 1e-12);
            }
        } else {
            let c = ta.compose(&tb);
            for i in 0..3 {
                prop_assert!((c.b[i] - tab.b[i]).abs() <= 1e-12);
                for j in 0..3 {
                    prop_assert!((c.a[i][j] - tab.a[i][j]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_exhaustive_and_seeded(n in 4usize..400, seed in any::<u64>()) {
        let d = gen_elemental(&Motion::default_for(MotionKind::Shearing), n, 3, 2, seed).unwrap();
        let (train, test) = (d.train_indices(), d.test_indices());
        prop_assert_eq!(train.len() + test.len(), n);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert!(all.iter().enumerate().all(|(i, &v)| i == v));
        let again = gen_elemental(&Motion::default_for(MotionKind::Shearing), n, 3, 2, seed).unwrap();
        prop_assert_eq!(again.train_mask, d.train_mask);
    }

    #[test]
    fn dtrj_round_trip_is_lossless(n in 1usize..50, frames in 2usize..6, dim in 2usize..4, seed in any::<u64>()) {
        let mut d = gen_elemental(&Motion::default_for(MotionKind::Rotation), n, frames, dim, seed).unwrap();
        d.round_to_f32();
        prop_assert_eq!(decode_trajectories(&encode_trajectories(&d).unwrap()).unwrap(), d);
    }

    #[test]
    fn time_normalization_maps_frames_onto_the_unit_interval(frames in 2usize..200, k in 0usize..200) {
        let k = k % frames;
        let t = normalize_time(k as f64, 0.0, (frames - 1) as f64);
        prop_assert!((t - (-1.0 + 2.0 * k as f64 / (frames - 1) as f64)).abs() <= 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn siren_slope_respects_the_spectral_bound(
        d in prop::sample::select(vec![8usize, 32]),
        n in 1usize..4,
        seed in any::<u64>(),
        q in point(1.0),
        t in -1.0f64..1.0,
    ) {
        let p = init_siren::<f64>(4, d, n, 12, 30.0, seed).unwrap();
        let x = Tensor::new(&[1, 4], vec![q[0], q[1], q[2], t]).unwrap();
        let j = p.spatial_jacobian(&x, 3).unwrap();
        let j = Tensor::new(&[12, 3], j.data().to_vec()).unwrap();
        let norm = motionfield::siren::spectral_norm(&j);
        prop_assert!(norm <= p.spectral_bound() * (1.0 + 1e-9), "{} > {}", norm, p.spectral_bound());
    }

    #[test]
    fn rotation_heads_are_orthonormal(v in 0usize..2, seed in any::<u64>(), pts in cloud(1..10), t in -1.0f64..1.0) {
        let variant = [Variant::Se3, Variant::ScaledSe3][v];
        let mut m = MotionModel::<f64>::siren(variant, 3, 16, 1, 5, seed).unwrap();
        // undo the small output init so the heads see large raw outputs
        for w in m.params_mut() {
            *w = w.map(|x| x * 20.0);
        }
        let map = m.evaluate_map(&points_to_tensor(&pts), t).unwrap();
        for b in 0..pts.len() {
            let a = &map.a.data()[b * 9..(b + 1) * 9];
            let col = |j: usize| [a[j], a[3 + j], a[6 + j]];
            let s = (col(0).iter().map(|x| x * x).sum::<f64>()).sqrt();
            prop_assert!(s > 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|r| col(i)[r] * col(j)[r]).sum::<f64>() / (s * s);
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - want).abs() <= 1e-6);
                }
            }
            let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) + a[2] * (a[3] * a[7] - a[4] * a[6]);
            prop_assert!((det / (s * s * s) - 1.0).abs() <= 1e-6);
            if variant == Variant::Se3 {
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn generated_meshes_are_closed_spheres() {
    assert_eq!(Mesh::icosphere(2).euler_characteristic(), 2);
    assert_eq!(Mesh::cylinder(0.25, -1.0, 1.0, 8, 16).unwrap().euler_characteristic(), 2);
}
