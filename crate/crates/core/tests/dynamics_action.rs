mod common;

use common::{normal_mat, normal_vec, spd};
use predcode::dynamics::{
    action_step, action_step_with_cost, colored_noise, generalized_free_energy, generalized_observation, generalized_step,
    overshoot, pid_reference, shift, simulate_pc_pid, simulate_pid_velocity, write_control_log, ActionConfig,
    GeneralizedModel, GeneralizedState, PcPidController,
};
use predcode::model::{infer_step, NetworkParams, NetworkSpec, NetworkState};
use predcode::{Activation, Matrix, PcError, Precision, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sc(v: f64) -> Vector {
    Vector::from_element(1, v)
}

#[test]
fn shift_by_hand() {
    let g = GeneralizedState::new(vec![sc(1.0), sc(2.0), sc(3.0)]).unwrap();
    assert_eq!(shift(&g).orders, vec![sc(2.0), sc(3.0), sc(0.0)]);
    assert_eq!(shift(&shift(&g)).orders, vec![sc(3.0), sc(0.0), sc(0.0)]);
    let still = GeneralizedState::new(vec![sc(4.0), sc(0.0), sc(0.0)]).unwrap();
    assert!(shift(&still).orders.iter().all(|o| o[0] == 0.0));
}

#[test]
fn zero_errors_leave_only_the_shift_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (n, p, k) = (3, 2, 3);
    let c = normal_mat(p, n, &mut rng);
    let a = normal_mat(n, n, &mut rng);
    let mut model = GeneralizedModel::new(c.clone(), a.clone(), k).unwrap();
    let mut orders = vec![normal_vec(n, &mut rng)];
    for i in 0..k {
        let sp = normal_vec(n, &mut rng);
        if i + 1 < k {
            orders.push(&a * (&orders[i] - &sp));
            model.setpoints[i] = sp;
        } else {
            model.setpoints[i] = orders[i].clone();
        }
    }
    let gen = GeneralizedState::new(orders).unwrap();
    let obs: Vec<Vector> = gen.orders.iter().map(|m| &c * m).collect();
    let eta = 0.05;
    let next = generalized_step(&gen, &obs, &model, eta).unwrap();
    let moved = shift(&gen);
    for i in 0..k {
        assert!((&next.orders[i] - (&gen.orders[i] + &moved.orders[i] * eta)).amax() < 1e-14);
    }
}

#[test]
fn single_order_flow_is_the_static_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let (p, n) = (3, 2);
        let theta = normal_mat(p, n, &mut rng);
        let (pi_o, pi_x) = (spd(p, &mut rng), spd(n, &mut rng));
        let prior = normal_vec(n, &mut rng);
        let o = normal_vec(p, &mut rng);
        let mu = normal_vec(n, &mut rng);
        let eta = 0.05;

        let spec = NetworkSpec::new(vec![p, n], Activation::Identity)
            .unwrap()
            .with_prior_mean(prior.clone())
            .unwrap()
            .with_step_size(eta)
            .unwrap();
        let params = NetworkParams {
            theta: vec![theta.clone()],
            precision: vec![Precision::full(pi_o.clone()).unwrap(), Precision::full(pi_x.clone()).unwrap()],
        };
        let mut state = NetworkState::zeros(&spec);
        state.clamp(0, o.clone()).unwrap();
        state.mu[1] = mu.clone();
        infer_step(&mut state, &params, &spec).unwrap();

        let mut model = GeneralizedModel::new(theta, -Matrix::identity(n, n), 1).unwrap();
        model.setpoints = vec![prior];
        model.obs_precisions = vec![Precision::full(pi_o).unwrap()];
        model.state_precisions = vec![Precision::full(pi_x).unwrap()];
        let next = generalized_step(&GeneralizedState::new(vec![mu]).unwrap(), &[o], &model, eta).unwrap();
        assert!((&next.orders[0] - &state.mu[1]).amax() < 1e-10);
    }
}

#[test]
fn ramp_tracking_recovers_unit_velocity() {
    let dt = 0.01;
    let mut model = GeneralizedModel::new(Matrix::identity(1, 1), Matrix::zeros(1, 1), 2).unwrap();
    model.state_precisions = vec![Precision::scalar(1, 1e-6).unwrap(); 2];
    let mut gen = GeneralizedState::zeros(1, 2).unwrap();
    let stream: Vec<Vector> = (0..4000).map(|t| sc(t as f64 * dt)).collect();
    for t in 0..stream.len() {
        let obs = generalized_observation(&stream, t, dt, 2).unwrap();
        gen = generalized_step(&gen, &obs, &model, dt).unwrap();
    }
    assert!((gen.orders[1][0] - 1.0).abs() < 1e-3, "velocity {}", gen.orders[1][0]);
    assert!((gen.orders[0][0] - stream.last().unwrap()[0]).abs() < 0.05);
}

#[test]
fn relaxation_settles_on_the_setpoints() {
    let target = 1.5;
    let mut model = GeneralizedModel::new(Matrix::identity(1, 1), -Matrix::identity(1, 1), 3).unwrap();
    model.setpoints = vec![sc(target), sc(0.0), sc(0.0)];
    let obs = model.setpoints.clone();
    let mut gen = GeneralizedState::new(vec![sc(-2.0), sc(0.7), sc(0.3)]).unwrap();
    let f0 = generalized_free_energy(&gen, &obs, &model).unwrap();
    for _ in 0..5000 {
        gen = generalized_step(&gen, &obs, &model, 0.05).unwrap();
    }
    for (m, s) in gen.orders.iter().zip(&model.setpoints) {
        assert!((m - s).amax() < 1e-9);
    }
    assert!(generalized_free_energy(&gen, &obs, &model).unwrap() < f0);
}

#[test]
fn action_increments_by_hand_and_by_finite_differences() {
    let p = Precision::identity(1);
    let cfg = ActionConfig::new(Matrix::identity(1, 1), 0.1);
    assert_eq!(action_step(&sc(1.0), &sc(1.0), &cfg, &p).unwrap()[0], 0.0);
    let step = action_step(&sc(2.0), &sc(1.0), &cfg, &p).unwrap()[0];
    assert_eq!(step, -1.0);
    let energy = |a: f64| (a - 1.0) * (a - 1.0);
    let h = 1e-6;
    assert!((step + 0.5 * (energy(2.0 + h) - energy(2.0 - h)) / (2.0 * h)).abs() < 1e-8);

    let flipped = ActionConfig::new(-Matrix::identity(1, 1), 0.1);
    assert_eq!(action_step(&sc(2.0), &sc(1.0), &flipped, &p).unwrap()[0], 1.0);

    let mut costly = cfg.clone();
    costly.action_precision = Some(Precision::identity(1));
    assert_eq!(action_step_with_cost(&sc(2.0), &sc(1.0), &sc(1.0), &costly, &p).unwrap()[0], -2.0);
    assert_eq!(action_step_with_cost(&sc(1.0), &sc(1.0), &sc(0.0), &costly, &p).unwrap()[0], 0.0);
    assert_eq!(action_step_with_cost(&sc(2.0), &sc(1.0), &sc(3.0), &cfg, &p).unwrap()[0], -1.0);
}

#[test]
fn discrete_pid_by_hand() {
    assert_eq!(pid_reference(&[0.0; 8], 1.0, 2.0, 3.0, 0.5).unwrap(), 0.0);
    assert_eq!(pid_reference(&[2.0], 3.0, 0.0, 0.0, 1.0).unwrap(), 6.0);
    let mut step = vec![0.0];
    step.extend([1.0; 10]);
    assert!((pid_reference(&step, 0.0, 1.0, 0.0, 1.0).unwrap() - 9.5).abs() < 1e-15);
    assert!(matches!(pid_reference(&[1.0], 0.0, 0.0, 1.0, 1.0), Err(PcError::Argument(_))));
    assert!(matches!(pid_reference(&[1.0, 1.0], 1.0, 0.0, 0.0, -1.0), Err(PcError::Argument(_))));
}

#[test]
fn controller_at_the_setpoint_is_idle() {
    let ctl = PcPidController::new([1.0, 0.5, 0.1], 0.01).unwrap();
    let log = simulate_pc_pid(&ctl, 2.0, 2.0, 500, &[]).unwrap();
    assert!(log.iter().all(|r| r.a == 0.0 && r.o == 2.0));
}

#[test]
fn controller_matches_the_derivative_form_pid() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let dt = 0.01;
    let disturbance: Vec<f64> = colored_noise(10_000, 5.0, &mut rng).unwrap().iter().map(|d| 0.5 * d).collect();
    for precisions in [[1.0, 0.5, 0.01], [2.0, 2.0, 0.0], [0.5, 1.5, 0.05]] {
        let ctl = PcPidController::new(precisions, dt).unwrap();
        let pc = simulate_pc_pid(&ctl, 1.0, 0.0, 10_000, &disturbance).unwrap();
        let pid = simulate_pid_velocity(ctl.gains(), dt, 1.0, 0.0, 10_000, &disturbance).unwrap();
        let gap = pc.iter().zip(&pid).map(|(x, y)| (x.a - y.a).abs().max((x.o - y.o).abs())).fold(0.0, f64::max);
        assert!(gap < 1e-10, "gap {gap:e}");
    }
}

#[test]
fn derivative_precision_damps_overshoot() {
    let sweep: Vec<f64> = [0.2, 0.5, 1.0, 2.0, 4.0]
        .iter()
        .map(|&kp| {
            let ctl = PcPidController::new([4.0, kp, 0.0], 0.01).unwrap();
            overshoot(&simulate_pc_pid(&ctl, 1.0, 0.0, 3000, &[]).unwrap(), 1.0)
        })
        .collect();
    assert!(sweep[0] > 0.1);
    for w in sweep.windows(2) {
        assert!(w[1] < w[0] || w[1] == 0.0, "{sweep:?}");
    }
}

#[test]
fn control_log_has_named_columns() {
    let ctl = PcPidController::new([1.0, 1.0, 0.0], 0.1).unwrap();
    let log = simulate_pc_pid(&ctl, 1.0, 0.0, 3, &[]).unwrap();
    let mut buf = Vec::new();
    write_control_log(&log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,o,a,F");
    assert_eq!(lines.len(), 4);
}

#[test]
fn colored_noise_has_unit_variance_and_memory() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = colored_noise(50_000, 4.0, &mut rng).unwrap();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let lag1 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1.0) / var;
    assert!((var - 1.0).abs() < 0.1, "variance {var}");
    assert!(lag1 > 0.9, "lag-one correlation {lag1}");
    assert!(colored_noise(10, 0.0, &mut rng).is_err());
}
