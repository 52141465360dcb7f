use motionflow::checkpoint::Checkpoint;
use motionflow::metrics::{energy_distance, pearson};
use motionflow::motion_space::MotionBasis;
use motionflow::objective::{ot_interpolate, target_field, DropoutMask, Parameterization};
use motionflow::predictor::{DrivingInputs, PredictorConfig, VectorFieldPredictor};
use motionflow::rng::{normal, normal_matrix, stream_rng};
use motionflow::sampler::{guided_output, integrate, GuidanceSpec, Solver};
use motionflow::sequence::SequenceFile;
use motionflow::synth::window_starts;
use motionflow::Tensor2;
use proptest::prelude::*;

fn tiny() -> VectorFieldPredictor {
    let cfg = PredictorConfig {
        hidden: 16,
        heads: 2,
        blocks: 1,
        window: 6,
        preceding: 2,
        ..PredictorConfig::desk()
    };
    let mut p = VectorFieldPredictor::new(cfg, 8).unwrap();
    let mut rng = stream_rng(9, 0);
    p.params_mut()
        .for_each_flat_mut(|_, v| *v += 0.2 * normal(&mut rng));
    p
}

fn inputs(p: &VectorFieldPredictor, seed: u64) -> DrivingInputs {
    let c = p.config();
    let mut rng = stream_rng(seed, 1);
    DrivingInputs {
        audio: normal_matrix(&mut rng, c.total_frames(), c.audio_dim),
        emotion: vec![1.0 / 7.0; 7],
        source_motion: normal_matrix(&mut rng, 1, c.latent_dim).into_vec(),
        extra: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolant_moves_along_the_target(seed in 0u64..1000, t in 0.0f64..=1.0) {
        let mut rng = stream_rng(seed, 0);
        let x0 = normal_matrix(&mut rng, 3, 5);
        let x1 = normal_matrix(&mut rng, 3, 5);
        let xt = ot_interpolate(&x0, &x1, t).unwrap().x_t;
        let u = target_field(&x0, &x1).unwrap();
        let along = x0.zip_map(&u, |a, b| a + t * b);
        prop_assert!(xt.max_abs_diff(&along) <= 1e-12);
    }

    #[test]
    fn guidance_is_affine_in_its_scales(seed in 0u64..50, t in 0.0f64..1.0, ga in -3.0f64..3.0, ge in -3.0f64..3.0) {
        let p = tiny();
        let c = inputs(&p, seed);
        let x = normal_matrix(&mut stream_rng(seed, 2), p.config().total_frames(), p.config().latent_dim);
        let raw = |m: DropoutMask| guided_output(&p, &x, &c, t, GuidanceSpec::None, m).unwrap();
        let full = raw(DropoutMask::NONE);
        let audio_only = raw(DropoutMask { drop_emotion: true, ..DropoutMask::NONE });
        let none = raw(DropoutMask { drop_emotion: true, drop_audio: true, ..DropoutMask::NONE });
        let got = guided_output(&p, &x, &c, t, GuidanceSpec::Incremental { gamma_a: ga, gamma_e: ge }, DropoutMask::NONE).unwrap();
        let mut want = none.clone();
        for i in 0..want.len() {
            let (n, a, f) = (none.data()[i], audio_only.data()[i], full.data()[i]);
            want.data_mut()[i] = n + ga * (a - n) + ge * (f - a);
        }
        prop_assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn solvers_are_exact_on_constant_fields(nfe in 1usize..40, c in -5.0f64..5.0, midpoint in any::<bool>()) {
        let solver = if midpoint { Solver::Midpoint } else { Solver::Euler };
        let u = Tensor2::filled(2, 3, c);
        let x0 = Tensor2::filled(2, 3, 0.25);
        let traj = integrate(solver, |_, _| Ok(u.clone()), &x0, nfe, |_| {}).unwrap();
        prop_assert_eq!(traj.len(), nfe + 1);
        prop_assert!(traj[nfe].max_abs_diff(&Tensor2::filled(2, 3, 0.25 + c)) <= 1e-12);
    }

    #[test]
    fn sequence_edits_are_local(seed in 0u64..500, index in 0usize..4, delta in -10.0f64..10.0) {
        let basis = MotionBasis::seeded(seed, 4, 9).unwrap();
        let latents = normal_matrix(&mut stream_rng(seed, 3), 7, 9);
        let s = SequenceFile::new(latents, basis, serde_json::Value::Null).unwrap();
        let e = s.edit(index, delta).unwrap();
        for f in 0..7 {
            for m in 0..4 {
                let want = s.coeffs.get(f, m) + if m == index { delta } else { 0.0 };
                prop_assert!((e.coeffs.get(f, m) - want).abs() <= 1e-9);
            }
        }
        prop_assert_eq!(SequenceFile::from_bytes(&e.to_bytes()).unwrap(), e);
    }

    #[test]
    fn energy_distance_is_symmetric(seed in 0u64..200, shift in 0.0f64..2.0) {
        let mut rng = stream_rng(seed, 4);
        let x = normal_matrix(&mut rng, 30, 3);
        let y = normal_matrix(&mut rng, 40, 3).map(|v| v + shift);
        let (a, b) = (energy_distance(&x, &y).unwrap(), energy_distance(&y, &x).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(seed in 0u64..200, scale in 0.1f64..10.0, offset in -5.0f64..5.0) {
        let mut rng = stream_rng(seed, 5);
        let a: Vec<f64> = (0..50).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.5 * normal(&mut rng)).collect();
        let mapped: Vec<f64> = b.iter().map(|v| scale * v + offset).collect();
        prop_assert!((pearson(&a, &b).unwrap() - pearson(&a, &mapped).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn window_starts_leave_room(frames in 1usize..80, window in 1usize..30, preceding in 0usize..10) {
        for s in window_starts(frames, window, preceding) {
            prop_assert!(s + window <= frames);
            prop_assert!(s == 0 || s >= preceding);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, tag in 0usize..3) {
        let param = [Parameterization::Flow, Parameterization::Epsilon, Parameterization::X0][tag];
        let mut p = tiny();
        let mut rng = stream_rng(seed, 6);
        p.params_mut().for_each_flat_mut(|_, v| *v += normal(&mut rng));
        let ck = Checkpoint::from_predictor(&p, param, serde_json::json!({ "seed": seed }));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back.parameterization, param);
        prop_assert_eq!(back.predictor().unwrap().params().to_flat(), p.params().to_flat());
    }
}
