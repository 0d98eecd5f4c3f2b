mod common;

use common::{covariance_objective, fd_matrix, normal_vec, spd};
use predcode::data::synth_gaussian;
use predcode::experiment::stream_fixed_point;
use predcode::model::{NetworkParams, NetworkSpec};
use predcode::precision::{
    empirical_fixed_point_check, fisher_check_mu, fisher_check_theta, learn_precision, natural_gradient,
    precision_direction, precision_step, PrecisionMode, EIGEN_FLOOR,
};
use predcode::{Activation, Matrix, Precision, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn m1(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}

fn v1(v: f64) -> Vector {
    Vector::from_element(1, v)
}

fn integrate(eps: f64, start: f64, lr: f64, steps: usize) -> f64 {
    let mut c = m1(start);
    for _ in 0..steps {
        c = precision_step(&c, &v1(eps), lr).unwrap();
    }
    c[(0, 0)]
}

#[test]
fn scalar_ode_converges_to_cube_root_of_squared_error() {
    for eps in [1.0f64, 8.0, 27.0] {
        let sigma = integrate(eps, 1.0, 0.05, 20_000);
        assert!((sigma - (eps * eps).cbrt()).abs() < 1e-6, "ε = {eps}: Σ = {sigma}");
    }
    assert!((integrate(8.0, 1.0, 0.05, 20_000) - 4.0).abs() < 1e-9);
}

#[test]
fn doubling_errors_scales_the_fixed_point() {
    let a = integrate(1.7, 1.0, 0.05, 20_000);
    let b = integrate(3.4, 1.0, 0.05, 20_000);
    assert!((b / a - 2f64.powf(2.0 / 3.0)).abs() < 1e-9);
}

#[test]
fn unit_error_at_unit_variance_is_stationary() {
    assert_eq!(precision_direction(&m1(1.0), &[v1(1.0)]).unwrap()[(0, 0)], 0.0);
    let constant = vec![v1(1.0); 200];
    assert_eq!(empirical_fixed_point_check(&constant, &m1(1.0)).unwrap(), 0.0);
}

#[test]
fn zero_error_decays_to_the_floor() {
    let sigma = integrate(0.0, 2.0, 0.5, 5000);
    assert!((sigma - EIGEN_FLOOR).abs() < 1e-12);
}

#[test]
fn monte_carlo_self_consistency_within_sampling_error() {
    let n = 100_000;
    let samples = synth_gaussian(42, n, &Vector::zeros(1), &m1(1.0)).unwrap();
    let sigma = stream_fixed_point(&samples, 1.0).unwrap();
    let residual = empirical_fixed_point_check(&samples, &m1(sigma)).unwrap();
    assert!(residual < 3.0 / (n as f64).sqrt(), "residual {residual}");
}

#[test]
fn direction_descends_the_effective_objective_and_the_energy_at_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let sigma = 0.2 + 3.0 * rand::Rng::random::<f64>(&mut rng);
        let eps = normal_vec(1, &mut rng);
        let dir = precision_direction(&m1(sigma), std::slice::from_ref(&eps)).unwrap();
        let g = fd_matrix(&m1(sigma), |c| covariance_objective(c, std::slice::from_ref(&eps)));
        assert!(((dir[(0, 0)] + g[(0, 0)]) / dir[(0, 0)].abs().max(1e-3)).abs() < 1e-4);
        let energy = |c: &Matrix| eps[0] * eps[0] / c[(0, 0)] + c[(0, 0)].ln();
        let at_unit = precision_direction(&m1(1.0), std::slice::from_ref(&eps)).unwrap();
        let gf = fd_matrix(&m1(1.0), energy);
        assert!(((at_unit[(0, 0)] + gf[(0, 0)]) / at_unit[(0, 0)].abs().max(1e-3)).abs() < 1e-4);
    }
}

#[test]
fn learned_precisions_stay_positive_definite() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for mode in [PrecisionMode::DiagonalLearned, PrecisionMode::FullLearned] {
        let mut p = Precision::full(spd(3, &mut rng)).unwrap();
        for _ in 0..200 {
            let errs: Vec<Vector> = (0..4).map(|_| normal_vec(3, &mut rng) * 5.0).collect();
            p = learn_precision(&p, &errs, 0.7, mode).unwrap();
            assert!(p.to_matrix().symmetric_eigenvalues().min() > 0.0);
        }
    }
    let fixed = Precision::identity(2);
    assert_eq!(learn_precision(&fixed, &[Vector::zeros(2)], 0.5, PrecisionMode::Fixed).unwrap(), fixed);
}

fn linear(dims: Vec<usize>) -> (NetworkSpec, NetworkParams) {
    let spec = NetworkSpec::new(dims, Activation::Identity).unwrap();
    let params = NetworkParams::zeros(&spec);
    (spec, params)
}

#[test]
fn fisher_in_mu_equals_precision() {
    let (spec, params) = linear(vec![3, 2]);
    let chk = fisher_check_mu(&params, &spec, 0).unwrap();
    assert!((&chk.numeric_hessian - Matrix::identity(3, 3) * 2.0).amax() < 1e-6);
    assert!(chk.deviation < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (spec, mut params) = linear(vec![4, 3]);
    params.theta[0] = common::normal_mat(4, 3, &mut rng);
    for l in 0..=1 {
        params.precision[l] = Precision::full(spd(spec.dim(l), &mut rng)).unwrap();
        assert!(fisher_check_mu(&params, &spec, l).unwrap().deviation < 1e-5);
    }

    let (spec, mut params) = linear(vec![1, 1]);
    params.precision[0] = Precision::scalar(1, 5.0).unwrap();
    let chk = fisher_check_mu(&params, &spec, 0).unwrap();
    assert!((chk.numeric_hessian[(0, 0)] - 10.0).abs() < 1e-8);
    assert!((chk.aligned[(0, 0)] - 5.0).abs() < 1e-8);
}

#[test]
fn fisher_in_theta_is_variance_times_precision() {
    let (spec, mut params) = linear(vec![1, 1]);
    let ones = vec![v1(1.0), v1(-1.0)];
    let chk = fisher_check_theta(&params, &spec, 0, &ones).unwrap();
    assert!((chk.aligned[(0, 0)] - 1.0).abs() < 1e-8);

    params.precision[0] = Precision::scalar(1, 2.0).unwrap();
    let samples = synth_gaussian(4, 100_000, &Vector::zeros(1), &m1(3.0)).unwrap();
    let chk = fisher_check_theta(&params, &spec, 0, &samples).unwrap();
    assert!((chk.aligned[(0, 0)] - 6.0).abs() / 6.0 < 0.05);
    assert!((chk.predicted[(0, 0)] - 6.0).abs() / 6.0 < 0.05);
}

#[test]
fn constant_activities_leave_only_the_mean_term() {
    let (spec, params) = linear(vec![2, 1]);
    let chk = fisher_check_theta(&params, &spec, 0, &vec![v1(1.5); 10]).unwrap();
    assert!(chk.predicted.amax() < 1e-12);
    assert!((&chk.aligned - &chk.predicted_second_moment).amax() < 1e-6);
    assert!((chk.aligned[(0, 0)] - 2.25).abs() < 1e-6);
}

#[test]
fn natural_gradient_is_invariant_to_precision_scale() {
    let eps = 0.8;
    let steps: Vec<f64> = [0.5, 2.0, 10.0]
        .iter()
        .map(|&pi| natural_gradient(&m1(pi), &v1(pi * eps)).unwrap()[0])
        .collect();
    assert!(steps.iter().all(|s| (s - eps).abs() < 1e-12));
}
