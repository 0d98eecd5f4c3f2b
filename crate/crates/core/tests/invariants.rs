mod common;

use common::{normal_mat, normal_vec, spd, Net};
use predcode::data::{parse_idx, IdxTensor};
use predcode::experiment::{ExperimentConfig, ExperimentKind};
use predcode::graph::{ComputationGraph, GraphDocument, Loss};
use predcode::kalman::{kf_step, BeliefState, Trajectory};
use predcode::linalg::check_spd;
use predcode::model::{compute_errors, free_energy, infer_step};
use predcode::precision::{precision_step, precision_step_diagonal};
use predcode::training::{argmax, one_hot};
use predcode::{Activation, Vector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn small_step_inference_never_increases_free_energy(seed in any::<u64>(), clamp_bottom in any::<bool>()) {
        let net = Net::random(&mut rng(seed));
        let spec = net.spec().with_step_size(0.005).unwrap();
        let params = net.params();
        let mut state = net.state();
        if clamp_bottom {
            state.clamp(0, net.mu[0].clone()).unwrap();
        }
        compute_errors(&mut state, &params, &spec).unwrap();
        let mut f = free_energy(&state, &params, &spec).unwrap();
        for _ in 0..50 {
            infer_step(&mut state, &params, &spec).unwrap();
            let next = free_energy(&state, &params, &spec).unwrap();
            prop_assert!(next <= f + 1e-9 * f.abs().max(1.0), "{next} > {f}");
            f = next;
        }
        if clamp_bottom {
            prop_assert_eq!(&state.mu[0], &net.mu[0]);
        }
    }

    #[test]
    fn covariance_step_stays_positive_definite(seed in any::<u64>(), lr in 1e-3f64..0.5) {
        let mut r = rng(seed);
        let n = 1 + (seed % 4) as usize;
        let mut cov = spd(n, &mut r);
        for _ in 0..20 {
            let e = normal_vec(n, &mut r) * 3.0;
            cov = precision_step(&cov, &e, lr).unwrap();
            prop_assert!(check_spd("cov", &cov).is_ok());
        }
    }

    #[test]
    fn diagonal_variances_stay_positive(v in prop::collection::vec(1e-3f64..10.0, 1..6), e in -50.0f64..50.0, lr in 1e-3f64..1.0) {
        let var = Vector::from_vec(v);
        let errs = vec![Vector::from_element(var.len(), e)];
        let out = precision_step_diagonal(&var, &errs, lr).unwrap();
        prop_assert!(out.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn kalman_covariance_stays_symmetric_psd(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = 1 + (seed % 4) as usize;
        let p = 1 + (seed % 3) as usize;
        let model = predcode::kalman::LinearStateSpace::new(
            normal_mat(n, n, &mut r) * 0.5, normal_mat(n, 1, &mut r), normal_mat(p, n, &mut r), spd(n, &mut r), spd(p, &mut r),
        ).unwrap();
        let mut b = BeliefState::new(Vector::zeros(n), spd(n, &mut r)).unwrap();
        for _ in 0..30 {
            b = kf_step(&b, &normal_vec(1, &mut r), &normal_vec(p, &mut r), &model).unwrap();
            prop_assert!((&b.cov - b.cov.transpose()).amax() < 1e-9);
            prop_assert!(b.cov.symmetric_eigenvalues().min() > -1e-9);
        }
    }

    #[test]
    fn seeds_beyond_toml_range_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let mut cfg = ExperimentConfig::of_kind(ExperimentKind::Train);
        cfg.seed = seed;
        prop_assert!(cfg.validate().is_err());
    }

    #[test]
    fn one_hot_argmax_round_trip(dim in 1usize..20, idx in 0usize..20, smoothing in 0.0f64..0.9) {
        prop_assume!(idx < dim);
        let v = one_hot(idx, dim, smoothing).unwrap();
        prop_assert_eq!(argmax(&v).unwrap(), idx);
        prop_assert!((v.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn idx_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut r = rng(seed);
        let data: Vec<u8> = (0..n).map(|_| rand::Rng::random(&mut r)).collect();
        let t = IdxTensor::new(shape, data).unwrap();
        prop_assert_eq!(parse_idx(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn trajectory_csv_round_trip(seed in any::<u64>(), steps in 1usize..20) {
        let mut r = rng(seed);
        let traj = Trajectory {
            controls: (0..steps).map(|_| normal_vec(2, &mut r)).collect(),
            observations: (0..steps).map(|_| normal_vec(3, &mut r)).collect(),
        };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        prop_assert_eq!(Trajectory::read_csv(buf.as_slice()).unwrap(), traj);
    }

    #[test]
    fn graph_document_round_trip(seed in any::<u64>(), family in 0usize..3) {
        let mut r = rng(seed);
        let loss = Loss::Sum;
        let g = match family {
            0 => ComputationGraph::mlp(&[3, 4, 2], Activation::Tanh, loss, &mut r),
            1 => ComputationGraph::chain(3, 4, Activation::Tanh, loss, &mut r),
            _ => ComputationGraph::diamond(3, 2, Activation::Tanh, loss, &mut r),
        }.unwrap();
        let doc = GraphDocument::from_graph(&g);
        let back = GraphDocument::from_json(&doc.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &doc);
        let rebuilt = back.build().unwrap();
        prop_assert_eq!(rebuilt.len(), g.len());
    }

    #[test]
    fn config_toml_round_trip(kind in 0usize..7, seed in 0..=i64::MAX as u64) {
        let mut cfg = ExperimentConfig::of_kind(ExperimentKind::ALL[kind]);
        cfg.seed = seed;
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
}
