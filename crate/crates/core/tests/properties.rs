use issl_core::evaluation::{compute_metrics, post_process, EvalSettings};
use issl_core::geometry::{self, CameraIntrinsics, DepthMap, RigidMotion};
use issl_core::selfsample::{
    generate_self_sample, MotionDistribution, SamplerConfig, SelfDepthSource,
};
use issl_core::warp::{self, Image, SampleGrid, ValidityMask};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn depth_map(w: usize, h: usize) -> impl Strategy<Value = DepthMap> {
    prop::collection::vec(0.5f64..50.0, w * h).prop_map(move |v| DepthMap::new(w, h, v).unwrap())
}

fn image(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, 3 * w * h)
        .prop_map(move |v| Image::new(w, h, 3, v).unwrap())
}

fn motion(rot: f64, trans: f64) -> impl Strategy<Value = RigidMotion> {
    (
        prop::array::uniform3(-rot..rot),
        prop::array::uniform3(-trans..trans),
    )
        .prop_map(|(r, t)| RigidMotion::new(r, t).unwrap())
}

fn k() -> CameraIntrinsics {
    CameraIntrinsics::new(12.0, 11.0, 4.5, 3.5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn median_scaled_metrics_ignore_global_scale(gt in depth_map(6, 5), pred in depth_map(6, 5), s in 0.01f64..100.0) {
        let valid = ValidityMask::all(6, 5);
        let settings = EvalSettings { max_depth: 1e3, ..EvalSettings::default() };
        let a = compute_metrics(&pred, &gt, &valid, &settings).unwrap();
        let b = compute_metrics(&pred.scaled(s).unwrap(), &gt, &valid, &settings).unwrap();
        prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
        prop_assert!((a.rms - b.rms).abs() < 1e-9 * (1.0 + a.rms));
        prop_assert_eq!(a.a1, b.a1);
    }

    #[test]
    fn post_processing_agrees_with_consistent_inputs(d in depth_map(8, 3)) {
        // the mirrored network output of a mirror-symmetric predictor
        let flipped = {
            let mut v = d.values().to_vec();
            for row in v.chunks_mut(8) {
                row.reverse();
            }
            DepthMap::new(8, 3, v).unwrap()
        };
        let out = post_process(&d, &flipped).unwrap();
        for (a, b) in out.values().iter().zip(d.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_motions_respect_the_schedule(seed in any::<u64>(), epoch in 0usize..20, gaussian in any::<bool>()) {
        let cfg = SamplerConfig {
            distribution: if gaussian { MotionDistribution::Gaussian } else { MotionDistribution::Uniform },
            ..SamplerConfig::default()
        };
        let bound = cfg.theta_r_at(epoch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..32 {
            let m = cfg.sample_motion(epoch, &mut rng).unwrap();
            prop_assert!(m.rotation.iter().all(|r| r.abs() <= bound));
            prop_assert!(m.translation.iter().all(|t| t.abs() <= cfg.theta_t));
        }
    }

    #[test]
    fn self_samples_only_carry_depth_where_valid(img in image(9, 7), d in depth_map(9, 7), m in motion(0.2, 0.5)) {
        let s = generate_self_sample(&img, &d, &m, &k(), SelfDepthSource::Sampled).unwrap();
        for (i, z) in s.depth.values().iter().enumerate() {
            prop_assert_eq!(*z > 0.0, s.validity.is_valid(i));
        }
        let n = 63;
        for c in 0..3 {
            for i in 0..n {
                let v = s.image.data()[c * n + i];
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn warping_there_and_back_lands_on_the_pixel(d in depth_map(7, 6), m in motion(0.05, 0.2)) {
        let k = k();
        let fwd = warp::correspondence_grid(&d, &m, &k, geometry::DEFAULT_Z_MIN);
        let cloud = geometry::lift(&d, &k);
        let moved = geometry::transform_points(&cloud, &geometry::motion_to_matrix(&m));
        let back = geometry::transform_points(&moved, &geometry::motion_to_matrix(&geometry::invert_motion(&m)));
        let p = geometry::project(&back, &k);
        let id = SampleGrid::identity(7, 6);
        for i in 0..42 {
            prop_assert!((p.grid.u()[i] - id.u()[i]).abs() < 1e-9);
            prop_assert!((p.grid.v()[i] - id.v()[i]).abs() < 1e-9);
            prop_assert!(fwd.z[i].is_finite());
        }
    }
}
