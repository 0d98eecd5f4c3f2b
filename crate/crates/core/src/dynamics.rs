//! Generalised coordinates of motion, active inference and the PID equivalence.
//!
//! A generalised state `μ̃ = [μ, μ′, μ″, …]` holds `K` orders of motion. The
//! shift operator `D` maps each order to the next and zero-pads the top.
//! With the linear model
//!
//! `ε_o^k = o^k − C μ^k`, `ε_x^k = μ^{k+1} − A(μ^k − μ̄^k)` (with `μ^K = 0`)
//!
//! the state follows `dμ̃/dt = Dμ̃ − ∂F/∂μ̃`, with the same F/2 convention as
//! the rest of the crate. Precisions are block-diagonal across orders.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, shape_err, PcError, Result};
use crate::linalg::{Matrix, Precision, Vector};

/// Default number of orders of motion.
pub const DEFAULT_ORDERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedState {
    pub orders: Vec<Vector>,
}

impl GeneralizedState {
    pub fn new(orders: Vec<Vector>) -> Result<Self> {
        let dim = orders.first().ok_or_else(|| PcError::Argument("at least one order is required".into()))?.len();
        if orders.iter().any(|o| o.len() != dim) {
            return Err(shape_err("all orders must share a dimension"));
        }
        Ok(GeneralizedState { orders })
    }

    pub fn zeros(dim: usize, k: usize) -> Result<Self> {
        Self::new(vec![Vector::zeros(dim); k])
    }

    pub fn num_orders(&self) -> usize {
        self.orders.len()
    }

    pub fn dim(&self) -> usize {
        self.orders[0].len()
    }
}

/// `D[μ, μ′, …, μ^(K−1)] = [μ′, …, μ^(K−1), 0]`.
pub fn shift(gen: &GeneralizedState) -> GeneralizedState {
    let mut orders: Vec<Vector> = gen.orders[1..].to_vec();
    orders.push(Vector::zeros(gen.dim()));
    GeneralizedState { orders }
}

/// Linear generalised model with per-order setpoints and precisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedModel {
    /// Observation map `C` (`p × n`).
    pub c: Matrix,
    /// Dynamics map `A` (`n × n`).
    pub a: Matrix,
    /// `μ̄^k` per order.
    pub setpoints: Vec<Vector>,
    pub obs_precisions: Vec<Precision>,
    pub state_precisions: Vec<Precision>,
}

impl GeneralizedModel {
    /// Zero setpoints and identity precisions over `k` orders.
    pub fn new(c: Matrix, a: Matrix, k: usize) -> Result<Self> {
        let (p, n) = c.shape();
        let m = GeneralizedModel {
            setpoints: vec![Vector::zeros(n); k],
            obs_precisions: vec![Precision::identity(p); k],
            state_precisions: vec![Precision::identity(n); k],
            c,
            a,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_orders(&self) -> usize {
        self.setpoints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (p, n) = self.c.shape();
        let k = self.setpoints.len();
        if k == 0 {
            return Err(PcError::Argument("at least one order is required".into()));
        }
        if self.a.shape() != (n, n) {
            return Err(shape_err(format!("A is {:?}, expected ({n}, {n})", self.a.shape())));
        }
        ensure_len("observation precisions", self.obs_precisions.len(), k)?;
        ensure_len("state precisions", self.state_precisions.len(), k)?;
        for i in 0..k {
            ensure_len("setpoint", self.setpoints[i].len(), n)?;
            ensure_len("observation precision", self.obs_precisions[i].dim(), p)?;
            ensure_len("state precision", self.state_precisions[i].dim(), n)?;
        }
        Ok(())
    }

    fn check(&self, gen: &GeneralizedState, obs: &[Vector]) -> Result<()> {
        self.validate()?;
        ensure_len("orders", gen.num_orders(), self.num_orders())?;
        ensure_len("state dimension", gen.dim(), self.c.ncols())?;
        ensure_len("observation orders", obs.len(), self.num_orders())?;
        for o in obs {
            ensure_len("observation", o.len(), self.c.nrows())?;
        }
        Ok(())
    }
}

/// Observation and state errors at every order.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedErrors {
    pub obs: Vec<Vector>,
    pub state: Vec<Vector>,
}

pub fn generalized_errors(gen: &GeneralizedState, obs: &[Vector], model: &GeneralizedModel) -> Result<GeneralizedErrors> {
    model.check(gen, obs)?;
    let k = gen.num_orders();
    let obs_err = (0..k).map(|i| &obs[i] - &model.c * &gen.orders[i]).collect();
    let state = (0..k)
        .map(|i| {
            let next = if i + 1 < k { gen.orders[i + 1].clone() } else { Vector::zeros(gen.dim()) };
            next - &model.a * (&gen.orders[i] - &model.setpoints[i])
        })
        .collect();
    Ok(GeneralizedErrors { obs: obs_err, state })
}

/// `Σ_k [ε_oᵀΠ_oε_o + ε_xᵀΠ_xε_x + ln det(2πΣ_o) + ln det(2πΣ_x)]`.
pub fn generalized_free_energy(gen: &GeneralizedState, obs: &[Vector], model: &GeneralizedModel) -> Result<f64> {
    let e = generalized_errors(gen, obs, model)?;
    let mut f = 0.0;
    for i in 0..gen.num_orders() {
        let (po, px) = (&model.obs_precisions[i], &model.state_precisions[i]);
        f += po.quad_form(&e.obs[i]) + px.quad_form(&e.state[i]) + po.log_det_2pi_cov() + px.log_det_2pi_cov();
    }
    Ok(f)
}

/// `−½ ∂F/∂μ^k` for every order.
pub fn generalized_force(gen: &GeneralizedState, obs: &[Vector], model: &GeneralizedModel) -> Result<Vec<Vector>> {
    let e = generalized_errors(gen, obs, model)?;
    let k = gen.num_orders();
    let wo: Vec<Vector> = (0..k).map(|i| model.obs_precisions[i].apply(&e.obs[i])).collect();
    let wx: Vec<Vector> = (0..k).map(|i| model.state_precisions[i].apply(&e.state[i])).collect();
    Ok((0..k)
        .map(|i| {
            let mut f = model.c.tr_mul(&wo[i]) + model.a.tr_mul(&wx[i]);
            if i > 0 {
                f -= &wx[i - 1];
            }
            f
        })
        .collect())
}

/// One Euler step `μ̃ ← μ̃ + η (Dμ̃ − ½ ∂F/∂μ̃)`.
pub fn generalized_step(gen: &GeneralizedState, obs: &[Vector], model: &GeneralizedModel, eta: f64) -> Result<GeneralizedState> {
    let force = generalized_force(gen, obs, model)?;
    let motion = shift(gen);
    let orders: Vec<Vector> = (0..gen.num_orders())
        .map(|i| &gen.orders[i] + (&motion.orders[i] + &force[i]) * eta)
        .collect();
    if let Some(i) = orders.iter().position(|o| o.iter().any(|v| !v.is_finite() || v.abs() > 1e12)) {
        return Err(PcError::Divergence { location: format!("order {i}"), iteration: 0 });
    }
    Ok(GeneralizedState { orders })
}

/// Generalised observations `[o_t, o′_t, …]` by backward differences of a scalar-or-vector stream.
///
/// Samples before the start of the stream repeat the first one.
pub fn generalized_observation(stream: &[Vector], t: usize, dt: f64, orders: usize) -> Result<Vec<Vector>> {
    if !(dt > 0.0) {
        return Err(PcError::Argument(format!("dt must be positive, got {dt}")));
    }
    if t >= stream.len() {
        return Err(PcError::Argument(format!("time index {t} beyond stream of {}", stream.len())));
    }
    let at = |s: isize| stream[s.max(0) as usize].clone();
    let mut out = Vec::with_capacity(orders);
    for k in 0..orders {
        let mut acc = Vector::zeros(stream[t].len());
        let mut binom = 1.0;
        for j in 0..=k {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            acc += at(t as isize - j as isize) * (sign * binom);
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
        out.push(acc / dt.powi(k as i32));
    }
    Ok(out)
}

/// Forward model and action prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionConfig {
    /// `∂o/∂a` (`p × m`).
    pub forward_model: Matrix,
    pub action_prior: Vector,
    /// `Σ_a⁻¹`; `None` means action is free.
    pub action_precision: Option<Precision>,
    pub step: f64,
}

impl ActionConfig {
    /// Zero action prior, no action cost.
    pub fn new(forward_model: Matrix, step: f64) -> Self {
        let m = forward_model.ncols();
        ActionConfig { forward_model, action_prior: Vector::zeros(m), action_precision: None, step }
    }
}

/// `−(∂o/∂a)ᵀ Σ_o⁻¹ (o − setpoint)`.
pub fn action_step(o: &Vector, setpoint: &Vector, cfg: &ActionConfig, obs_precision: &Precision) -> Result<Vector> {
    ensure_len("observation", o.len(), cfg.forward_model.nrows())?;
    ensure_len("setpoint", setpoint.len(), o.len())?;
    ensure_len("observation precision", obs_precision.dim(), o.len())?;
    Ok(-cfg.forward_model.tr_mul(&obs_precision.apply(&(o - setpoint))))
}

/// [`action_step`] minus `Σ_a⁻¹ (a − ā)`.
pub fn action_step_with_cost(
    o: &Vector,
    setpoint: &Vector,
    a: &Vector,
    cfg: &ActionConfig,
    obs_precision: &Precision,
) -> Result<Vector> {
    ensure_len("action", a.len(), cfg.forward_model.ncols())?;
    ensure_len("action prior", cfg.action_prior.len(), a.len())?;
    let step = action_step(o, setpoint, cfg, obs_precision)?;
    Ok(match &cfg.action_precision {
        Some(p) => {
            ensure_len("action precision", p.dim(), a.len())?;
            step - p.apply(&(a - &cfg.action_prior))
        }
        None => step,
    })
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(PcError::Argument(format!("dt must be positive, got {dt}")))
    }
}

/// Positional discrete PID: `k_p e_T + k_i ∫e (trapezoid) + k_d (e_T − e_{T−1})/dt`.
pub fn pid_reference(errors: &[f64], kp: f64, ki: f64, kd: f64, dt: f64) -> Result<f64> {
    check_dt(dt)?;
    let last = *errors.last().ok_or_else(|| PcError::Argument("empty error history".into()))?;
    if kd != 0.0 && errors.len() < 2 {
        return Err(PcError::Argument("the derivative term needs at least two samples".into()));
    }
    let integral = errors.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum::<f64>();
    let derivative = if errors.len() >= 2 { (last - errors[errors.len() - 2]) / dt } else { 0.0 };
    Ok(kp * last + ki * integral + kd * derivative)
}

/// Derivative-form PID `da/dt = k_i e + k_p ė + k_d ë` with backward differences.
///
/// Samples before the start of the history repeat the first one.
pub fn pid_velocity(errors: &[f64], kp: f64, ki: f64, kd: f64, dt: f64) -> Result<f64> {
    check_dt(dt)?;
    let n = errors.len();
    if n == 0 {
        return Err(PcError::Argument("empty error history".into()));
    }
    let at = |back: usize| errors[n.saturating_sub(1 + back)];
    let e = at(0);
    let de = (at(0) - at(1)) / dt;
    let dde = (at(0) - 2.0 * at(1) + at(2)) / (dt * dt);
    Ok(ki * e + kp * de + kd * dde)
}

/// How the per-order setpoints of the controller are formed from the target `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetpointMode {
    /// `[r, 0, 0]`: a constant target has zero motion.
    #[default]
    ConstantTarget,
    /// `[r, r, r]`: the same setpoint at every order.
    Shared,
}

/// Active-inference controller on a 1-D plant with identity generative and
/// forward models and three orders of motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcPidController {
    /// `[σ_z⁻¹, σ_z′⁻¹, σ_z″⁻¹]`.
    pub precisions: [f64; 3],
    pub dt: f64,
    pub setpoint_mode: SetpointMode,
}

impl PcPidController {
    pub fn new(precisions: [f64; 3], dt: f64) -> Result<Self> {
        check_dt(dt)?;
        if precisions.iter().any(|p| !(*p >= 0.0)) {
            return Err(PcError::Argument("precisions must be non-negative".into()));
        }
        Ok(PcPidController { precisions, dt, setpoint_mode: SetpointMode::default() })
    }

    /// PID gains `(k_p, k_i, k_d)` that this controller reproduces.
    pub fn gains(&self) -> (f64, f64, f64) {
        (self.precisions[1], self.precisions[0], self.precisions[2])
    }

    pub fn setpoints(&self, target: f64) -> [f64; 3] {
        match self.setpoint_mode {
            SetpointMode::ConstantTarget => [target, 0.0, 0.0],
            SetpointMode::Shared => [target; 3],
        }
    }

    /// Generalised observation errors at time `t` of the observation stream.
    pub fn errors(&self, observations: &[f64], t: usize, target: f64) -> Result<[f64; 3]> {
        if t >= observations.len() {
            return Err(PcError::Argument(format!("time index {t} beyond stream of {}", observations.len())));
        }
        let start = t.saturating_sub(2);
        let stream: Vec<Vector> = observations[start..=t].iter().map(|&o| Vector::from_element(1, o)).collect();
        let obs = generalized_observation(&stream, t - start, self.dt, 3)?;
        let sp = self.setpoints(target);
        Ok([obs[0][0] - sp[0], obs[1][0] - sp[1], obs[2][0] - sp[2]])
    }

    /// `da/dt = −Σ_k σ_k⁻¹ (o^k − μ̄^k)`.
    pub fn action_rate(&self, observations: &[f64], t: usize, target: f64) -> Result<f64> {
        let e = self.errors(observations, t, target)?;
        Ok(-(0..3).map(|k| self.precisions[k] * e[k]).sum::<f64>())
    }

    /// `Σ_k [σ_k⁻¹ ε_k² − ln(σ_k⁻¹ / 2π)]` over orders with positive precision.
    pub fn free_energy(&self, observations: &[f64], t: usize, target: f64) -> Result<f64> {
        let e = self.errors(observations, t, target)?;
        Ok((0..3)
            .filter(|&k| self.precisions[k] > 0.0)
            .map(|k| self.precisions[k] * e[k] * e[k] - (self.precisions[k] / (2.0 * PI)).ln())
            .sum())
    }
}

/// `ȯ = a + d`, Euler-discretised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorPlant {
    pub dt: f64,
}

impl IntegratorPlant {
    pub fn step(&self, o: f64, a: f64, disturbance: f64) -> f64 {
        o + self.dt * (a + disturbance)
    }
}

/// One row of a control log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub t: f64,
    pub o: f64,
    pub a: f64,
    #[serde(rename = "F")]
    pub free_energy: f64,
}

/// Closed-loop run of the PC controller on the integrator plant.
///
/// The action integrates `da/dt` with step `dt`; `disturbance[t]` (or zero
/// past its end) perturbs the plant.
pub fn simulate_pc_pid(
    controller: &PcPidController,
    target: f64,
    o0: f64,
    steps: usize,
    disturbance: &[f64],
) -> Result<Vec<ControlRecord>> {
    let plant = IntegratorPlant { dt: controller.dt };
    let mut obs = vec![o0];
    let mut a = 0.0;
    let mut log = Vec::with_capacity(steps);
    for t in 0..steps {
        a += controller.dt * controller.action_rate(&obs, t, target)?;
        let f = controller.free_energy(&obs, t, target)?;
        log.push(ControlRecord { t: t as f64 * controller.dt, o: obs[t], a, free_energy: f });
        let next = plant.step(obs[t], a, disturbance.get(t).copied().unwrap_or(0.0));
        if !next.is_finite() {
            return Err(PcError::Divergence { location: "plant".into(), iteration: t });
        }
        obs.push(next);
    }
    Ok(log)
}

/// Same loop driven by [`pid_velocity`] on `e = target − o`.
pub fn simulate_pid_velocity(
    gains: (f64, f64, f64),
    dt: f64,
    target: f64,
    o0: f64,
    steps: usize,
    disturbance: &[f64],
) -> Result<Vec<ControlRecord>> {
    let (kp, ki, kd) = gains;
    let plant = IntegratorPlant { dt };
    let mut o = o0;
    let mut errors = Vec::with_capacity(steps);
    let mut a = 0.0;
    let mut log = Vec::with_capacity(steps);
    for t in 0..steps {
        errors.push(target - o);
        a += dt * pid_velocity(&errors, kp, ki, kd, dt)?;
        log.push(ControlRecord { t: t as f64 * dt, o, a, free_energy: f64::NAN });
        o = plant.step(o, a, disturbance.get(t).copied().unwrap_or(0.0));
        if !o.is_finite() {
            return Err(PcError::Divergence { location: "plant".into(), iteration: t });
        }
    }
    Ok(log)
}

/// `(max o − target) / |target − o₀|`, clipped at zero.
pub fn overshoot(log: &[ControlRecord], target: f64) -> f64 {
    let Some(first) = log.first() else { return 0.0 };
    let span = (target - first.o).abs();
    let dir = (target - first.o).signum();
    let peak = log.iter().map(|r| dir * (r.o - target)).fold(f64::NEG_INFINITY, f64::max);
    (peak / span).max(0.0)
}

/// Writes `t,o,a,F` rows.
pub fn write_control_log<W: Write>(log: &[ControlRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Unit-variance Gaussian white noise smoothed by a Gaussian kernel of width `width` samples.
pub fn colored_noise<R: Rng + ?Sized>(n: usize, width: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(width > 0.0) {
        return Err(PcError::Argument(format!("kernel width must be positive, got {width}")));
    }
    let half = (4.0 * width).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let x = i as f64 - half as f64;
            (-x * x / (2.0 * width * width)).exp()
        })
        .collect();
    let norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    let white: Vec<f64> = (0..n + 2 * half).map(|_| StandardNormal.sample(rng)).collect();
    Ok((0..n)
        .map(|t| kernel.iter().enumerate().map(|(j, k)| k * white[t + j]).sum::<f64>() / norm)
        .collect())
}
