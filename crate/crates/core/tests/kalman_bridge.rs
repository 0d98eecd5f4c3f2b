mod common;

use common::{fd_matrix, normal_mat, normal_vec, spd};
use predcode::experiment::random_state_space;
use predcode::kalman::{
    kf_correct, kf_project, learn_online, learn_ssm_step, map_hessian, pc_linear_solve, pc_map_solve, ssm_loss,
    stability_bound, BeliefState, LinearStateSpace, PcSolveConfig, SsmLearnMask, Trajectory,
};
use predcode::{Matrix, PcError, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn m1(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}

fn v1(v: f64) -> Vector {
    Vector::from_element(1, v)
}

fn scalar(a: f64, c: f64, q: f64, r: f64) -> LinearStateSpace {
    LinearStateSpace::new(m1(a), m1(0.0), m1(c), m1(q), m1(r)).unwrap()
}

#[test]
fn identity_dynamics_without_noise_keep_the_belief() {
    let model = LinearStateSpace::new(Matrix::identity(2, 2), Matrix::zeros(2, 1), Matrix::identity(2, 2), Matrix::zeros(2, 2), Matrix::identity(2, 2)).unwrap();
    let b = BeliefState::new(Vector::from_vec(vec![1.0, -2.0]), Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
    let p = kf_project(&b, &v1(5.0), &model).unwrap();
    assert_eq!(p, b);
}

#[test]
fn scalar_projection() {
    let model = scalar(0.5, 1.0, 0.1, 1.0);
    let p = kf_project(&BeliefState::new(v1(2.0), m1(1.0)).unwrap(), &v1(0.0), &model).unwrap();
    assert!((p.mean[0] - 1.0).abs() < 1e-15);
    assert!((p.cov[(0, 0)] - 0.35).abs() < 1e-15);
}

#[test]
fn equal_information_halves_the_gain() {
    let r = spd(3, &mut ChaCha8Rng::seed_from_u64(1));
    let model = LinearStateSpace::new(Matrix::identity(3, 3), Matrix::zeros(3, 1), Matrix::identity(3, 3), r.clone(), r.clone()).unwrap();
    let prior = BeliefState::new(Vector::from_vec(vec![1.0, 2.0, 3.0]), r).unwrap();
    let o = Vector::from_vec(vec![3.0, 0.0, -1.0]);
    let post = kf_correct(&prior, &o, &model).unwrap();
    assert!((post.mean - (&prior.mean + &o) / 2.0).amax() < 1e-12);
}

#[test]
fn precise_observations_pin_the_mean() {
    let model = LinearStateSpace::new(Matrix::identity(2, 2), Matrix::zeros(2, 1), Matrix::identity(2, 2), Matrix::identity(2, 2), Matrix::identity(2, 2) * 1e-10).unwrap();
    let prior = BeliefState::new(Vector::zeros(2), Matrix::identity(2, 2)).unwrap();
    let o = Vector::from_vec(vec![0.7, -1.1]);
    let post = kf_correct(&prior, &o, &model).unwrap();
    assert!((post.mean - o).amax() < 1e-6);
}

/// Information-form oracle: `Σ = (Σ̂⁻¹ + CᵀR⁻¹C)⁻¹`, `μ = Σ(Σ̂⁻¹μ̂ + CᵀR⁻¹o)`.
fn information_form(prior: &BeliefState, o: &Vector, model: &LinearStateSpace) -> (Vector, Matrix) {
    let pi = prior.cov.clone().try_inverse().unwrap();
    let ri = model.obs_cov.clone().try_inverse().unwrap();
    let cov = (&pi + model.c.transpose() * &ri * &model.c).try_inverse().unwrap();
    let mean = &cov * (&pi * &prior.mean + model.c.transpose() * &ri * o);
    (mean, cov)
}

#[test]
fn correction_matches_information_form_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let model = random_state_space(3, 1, 2, &mut rng).unwrap();
        let prior = BeliefState::new(normal_vec(3, &mut rng), spd(3, &mut rng)).unwrap();
        let o = normal_vec(2, &mut rng);
        let post = kf_correct(&prior, &o, &model).unwrap();
        let (mean, cov) = information_form(&prior, &o, &model);
        assert!((post.mean - mean).amax() < 1e-10);
        assert!((post.cov - cov).amax() < 1e-10);
    }
}

#[test]
fn consistent_observation_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = random_state_space(3, 2, 2, &mut rng).unwrap();
    let prev = normal_vec(3, &mut rng);
    let u = normal_vec(2, &mut rng);
    let pred = model.transition(&prev, &u);
    let o = &model.c * &pred;
    let r = pc_linear_solve(&prev, &u, &o, &model, &PcSolveConfig::default()).unwrap();
    assert!(r.converged);
    assert!((r.mean - pred).amax() < 1e-12);
}

#[test]
fn scalar_map_estimate() {
    let model = scalar(1.0, 1.0, 1.0, 1.0);
    let r = pc_linear_solve(&v1(0.0), &v1(0.0), &v1(2.0), &model, &PcSolveConfig::default()).unwrap();
    assert!((r.mean[0] - 1.0).abs() < 1e-12);
}

#[test]
fn pc_matches_kalman_on_four_dimensional_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let model = random_state_space(4, 2, 3, &mut rng).unwrap();
        let prior = BeliefState::new(normal_vec(4, &mut rng), spd(4, &mut rng)).unwrap();
        let u = normal_vec(2, &mut rng);
        let o = normal_vec(3, &mut rng);
        let predicted = kf_project(&prior, &u, &model).unwrap();
        let kf = kf_correct(&predicted, &o, &model).unwrap();
        let pc = pc_map_solve(&predicted.mean, &predicted.cov, &o, &model.c, &model.obs_cov, &PcSolveConfig::default()).unwrap();
        assert!((pc.mean - kf.mean).amax() < 1e-6);
    }
}

#[test]
fn map_hessian_is_positive_definite_and_step_bound_is_enforced() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_state_space(3, 1, 2, &mut rng).unwrap();
    let h = map_hessian(&spd(3, &mut rng), &model.c, &spd(2, &mut rng));
    assert!(h.symmetric_eigenvalues().min() > 0.0);
    let bound = stability_bound(&h);
    assert!(bound > 0.0);
    let cfg = PcSolveConfig { step: Some(10.0 * bound), ..PcSolveConfig::default() };
    let e = pc_linear_solve(&Vector::zeros(3), &Vector::zeros(1), &Vector::zeros(2), &model, &cfg).unwrap_err();
    assert!(matches!(e, PcError::Argument(_)));
}

#[test]
fn zero_errors_leave_the_model_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = random_state_space(2, 1, 2, &mut rng).unwrap();
    let mu = normal_vec(2, &mut rng);
    let u = normal_vec(1, &mut rng);
    let next = model.transition(&mu, &u);
    let o = &model.c * &next;
    let out = learn_ssm_step(&next, &mu, &u, &o, &model, 0.1, SsmLearnMask::default()).unwrap();
    assert_eq!(out, model);
}

#[test]
fn learning_steps_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let model = LinearStateSpace::new(normal_mat(3, 3, &mut rng), normal_mat(3, 2, &mut rng), normal_mat(2, 3, &mut rng), spd(3, &mut rng), spd(2, &mut rng)).unwrap();
        let (mu, next, u, o) = (normal_vec(3, &mut rng), normal_vec(3, &mut rng), normal_vec(2, &mut rng), normal_vec(2, &mut rng));
        let lr = 1.0;
        let stepped = learn_ssm_step(&next, &mu, &u, &o, &model, lr, SsmLearnMask::default()).unwrap();
        let loss = |m: &LinearStateSpace| ssm_loss(&next, &mu, &u, &o, m).unwrap();
        let ga = fd_matrix(&model.a, |a| loss(&LinearStateSpace { a: a.clone(), ..model.clone() }));
        let gb = fd_matrix(&model.b, |b| loss(&LinearStateSpace { b: b.clone(), ..model.clone() }));
        let gc = fd_matrix(&model.c, |c| loss(&LinearStateSpace { c: c.clone(), ..model.clone() }));
        for (delta, g) in [(&stepped.a - &model.a, ga), (&stepped.b - &model.b, gb), (&stepped.c - &model.c, gc)] {
            assert!(common::rel_err(&delta, &(g * -0.5)) < 1e-5);
        }
    }
}

#[test]
fn online_learning_identifies_the_dynamics() {
    let truth = scalar(0.8, 1.0, 0.1, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let controls = vec![Vector::zeros(1); 5000];
    let (_, traj) = truth.simulate(&v1(1.0), &controls, &mut rng).unwrap();
    let start = scalar(0.3, 1.0, 0.1, 0.01);
    let mask = SsmLearnMask { a: true, b: false, c: false };
    let learned = learn_online(&start, &traj, &v1(1.0), 0.002, mask, &PcSolveConfig::default()).unwrap();
    assert!((learned.a[(0, 0)] - 0.8).abs() < 0.05, "{}", learned.a[(0, 0)]);
}

#[test]
fn trajectory_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let traj = Trajectory { controls: vec![v1(0.5), v1(-1.0)], observations: vec![Vector::from_vec(vec![1.0, 2.0]); 2] };
    traj.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "u0,o0,o1");
    assert_eq!(Trajectory::load(&path).unwrap(), traj);
}
