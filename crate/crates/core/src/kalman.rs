//! Linear state-space filtering: the analytic Kalman filter, the iterative
//! predictive-coding MAP solver, and Hebbian learning of `A`, `B`, `C`.
//!
//! Model: `x_{t+1} = A x_t + B u_t + ω`, `ω ~ N(0, Σ₁)`; `o_t = C x_t + z`, `z ~ N(0, Σ₂)`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, shape_err, PcError, Result};
use crate::linalg::{check_spd, check_spsd, lambda_max, spd_inverse, symmetrize, Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStateSpace {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    /// Process covariance Σ₁ (positive semi-definite; the MAP solver needs it definite).
    pub process_cov: Matrix,
    /// Observation covariance Σ₂.
    pub obs_cov: Matrix,
}

impl LinearStateSpace {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, process_cov: Matrix, obs_cov: Matrix) -> Result<Self> {
        let m = LinearStateSpace { a, b, c, process_cov, obs_cov };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        if self.a.shape() != (n, n) {
            return Err(shape_err(format!("A is {:?}, expected square", self.a.shape())));
        }
        if self.b.nrows() != n {
            return Err(shape_err(format!("B has {} rows, expected {n}", self.b.nrows())));
        }
        if self.c.ncols() != n {
            return Err(shape_err(format!("C has {} columns, expected {n}", self.c.ncols())));
        }
        if self.process_cov.shape() != (n, n) {
            return Err(shape_err("Σ₁ shape does not match A"));
        }
        let p = self.obs_dim();
        if self.obs_cov.shape() != (p, p) {
            return Err(shape_err("Σ₂ shape does not match C"));
        }
        check_spsd("Σ₁", &self.process_cov)?;
        check_spd("Σ₂", &self.obs_cov)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    fn check_step(&self, mean: &Vector, u: &Vector) -> Result<()> {
        ensure_len("state", mean.len(), self.state_dim())?;
        ensure_len("control", u.len(), self.control_dim())
    }

    /// `A μ + B u`.
    pub fn transition(&self, mean: &Vector, u: &Vector) -> Vector {
        &self.a * mean + &self.b * u
    }

    /// Samples a trajectory of `controls.len()` steps starting from `x0`.
    ///
    /// Returns the hidden states `x_1..x_T` and observations `o_t = C x_t + z`.
    pub fn simulate<R: Rng + ?Sized>(&self, x0: &Vector, controls: &[Vector], rng: &mut R) -> Result<(Vec<Vector>, Trajectory)> {
        self.check_step(x0, controls.first().unwrap_or(&Vector::zeros(self.control_dim())))?;
        let proc = noise_factor(&self.process_cov);
        let obs = noise_factor(&self.obs_cov);
        let mut x = x0.clone();
        let mut states = Vec::with_capacity(controls.len());
        let mut observations = Vec::with_capacity(controls.len());
        for u in controls {
            ensure_len("control", u.len(), self.control_dim())?;
            x = self.transition(&x, u) + &proc * gaussian(self.state_dim(), rng);
            observations.push(&self.c * &x + &obs * gaussian(self.obs_dim(), rng));
            states.push(x.clone());
        }
        Ok((states, Trajectory { controls: controls.to_vec(), observations }))
    }
}

fn gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// A square root `L` with `L Lᵀ = Σ` for a positive semi-definite `Σ`.
fn noise_factor(cov: &Matrix) -> Matrix {
    let eig = symmetrize(cov).symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Matrix::from_diagonal(&roots)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub mean: Vector,
    pub cov: Matrix,
}

impl BeliefState {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        ensure_len("belief covariance", cov.nrows(), mean.len())?;
        check_spsd("belief covariance", &cov)?;
        Ok(BeliefState { mean, cov })
    }
}

/// Projection: mean `A μ + B u`, covariance `A Σ Aᵀ + Σ₁`.
pub fn kf_project(belief: &BeliefState, u: &Vector, model: &LinearStateSpace) -> Result<BeliefState> {
    model.check_step(&belief.mean, u)?;
    ensure_len("belief covariance", belief.cov.nrows(), model.state_dim())?;
    let cov = symmetrize(&(&model.a * &belief.cov * model.a.transpose() + &model.process_cov));
    Ok(BeliefState { mean: model.transition(&belief.mean, u), cov })
}

/// Kalman gain `K = Σ̂ Cᵀ (C Σ̂ Cᵀ + Σ₂)⁻¹`.
pub fn kalman_gain(predicted_cov: &Matrix, model: &LinearStateSpace) -> Result<Matrix> {
    let innovation = &model.c * predicted_cov * model.c.transpose() + &model.obs_cov;
    let inv = innovation
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| PcError::Numerical("innovation covariance is singular".into()))?;
    Ok(predicted_cov * model.c.transpose() * inv)
}

/// Correction: `μ = μ̂ + K(o − C μ̂)`, `Σ = (I − K C) Σ̂`.
pub fn kf_correct(predicted: &BeliefState, o: &Vector, model: &LinearStateSpace) -> Result<BeliefState> {
    ensure_len("belief", predicted.mean.len(), model.state_dim())?;
    ensure_len("observation", o.len(), model.obs_dim())?;
    let k = kalman_gain(&predicted.cov, model)?;
    let mean = &predicted.mean + &k * (o - &model.c * &predicted.mean);
    let n = model.state_dim();
    let cov = symmetrize(&((Matrix::identity(n, n) - &k * &model.c) * &predicted.cov));
    Ok(BeliefState { mean, cov })
}

/// Project then correct.
pub fn kf_step(belief: &BeliefState, u: &Vector, o: &Vector, model: &LinearStateSpace) -> Result<BeliefState> {
    kf_correct(&kf_project(belief, u, model)?, o, model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcSolveConfig {
    /// Gradient step; `None` picks `1 / λ_max` of the objective's Hessian.
    pub step: Option<f64>,
    pub max_iters: usize,
    /// Stop once the max-norm of the update falls below this.
    pub tol: f64,
}

impl Default for PcSolveConfig {
    fn default() -> Self {
        PcSolveConfig { step: None, max_iters: 200_000, tol: 1e-13 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcSolveReport {
    pub mean: Vector,
    pub iterations: usize,
    pub converged: bool,
    pub step: f64,
}

/// Hessian of the halved MAP objective, `Cᵀ Σ₂⁻¹ C + Σ_p⁻¹`.
pub fn map_hessian(prior_precision: &Matrix, c: &Matrix, obs_precision: &Matrix) -> Matrix {
    symmetrize(&(c.transpose() * obs_precision * c + prior_precision))
}

/// Largest step for which gradient descent on a quadratic with this Hessian converges.
pub fn stability_bound(hessian: &Matrix) -> f64 {
    2.0 / lambda_max(hessian)
}

/// Gradient descent on `½[(o − Cμ)ᵀ Σ₂⁻¹ (o − Cμ) + (μ − m)ᵀ Σ_p⁻¹ (μ − m)]`.
pub fn pc_map_solve(
    prior_mean: &Vector,
    prior_cov: &Matrix,
    o: &Vector,
    c: &Matrix,
    obs_cov: &Matrix,
    cfg: &PcSolveConfig,
) -> Result<PcSolveReport> {
    ensure_len("prior covariance", prior_cov.nrows(), prior_mean.len())?;
    ensure_len("observation", o.len(), c.nrows())?;
    ensure_len("C columns", c.ncols(), prior_mean.len())?;
    let prior_precision = spd_inverse("prior covariance", prior_cov)?;
    let obs_precision = spd_inverse("observation covariance", obs_cov)?;
    let hessian = map_hessian(&prior_precision, c, &obs_precision);
    let bound = stability_bound(&hessian);
    let step = cfg.step.unwrap_or(1.0 / lambda_max(&hessian));
    if !(step > 0.0 && step < bound) {
        return Err(PcError::Argument(format!("step {step} outside the stable range (0, {bound})")));
    }
    let mut mu = prior_mean.clone();
    for it in 1..=cfg.max_iters {
        let eps_o = o - c * &mu;
        let eps_x = &mu - prior_mean;
        let delta = (c.transpose() * (&obs_precision * eps_o) - &prior_precision * eps_x) * step;
        mu += &delta;
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(PcError::Divergence { location: "pc_linear_solve".into(), iteration: it });
        }
        if delta.amax() < cfg.tol {
            return Ok(PcSolveReport { mean: mu, iterations: it, converged: true, step });
        }
    }
    Ok(PcSolveReport { mean: mu, iterations: cfg.max_iters, converged: false, step })
}

/// MAP estimate of `x_{t+1}` from the previous mean, with prior covariance Σ₁.
pub fn pc_linear_solve(
    prev_mean: &Vector,
    u: &Vector,
    o: &Vector,
    model: &LinearStateSpace,
    cfg: &PcSolveConfig,
) -> Result<PcSolveReport> {
    model.check_step(prev_mean, u)?;
    pc_map_solve(&model.transition(prev_mean, u), &model.process_cov, o, &model.c, &model.obs_cov, cfg)
}

/// `ε_xᵀ Σ₁⁻¹ ε_x + ε_oᵀ Σ₂⁻¹ ε_o` with `ε_x = μ_{t+1} − Aμ_t − Bu_t`, `ε_o = o − Cμ_{t+1}`.
pub fn ssm_loss(mu_next: &Vector, mu: &Vector, u: &Vector, o: &Vector, model: &LinearStateSpace) -> Result<f64> {
    let (eps_x, eps_o, p1, p2) = ssm_errors(mu_next, mu, u, o, model)?;
    Ok(eps_x.dot(&(&p1 * &eps_x)) + eps_o.dot(&(&p2 * &eps_o)))
}

fn ssm_errors(
    mu_next: &Vector,
    mu: &Vector,
    u: &Vector,
    o: &Vector,
    model: &LinearStateSpace,
) -> Result<(Vector, Vector, Matrix, Matrix)> {
    model.check_step(mu, u)?;
    ensure_len("next state", mu_next.len(), model.state_dim())?;
    ensure_len("observation", o.len(), model.obs_dim())?;
    let p1 = spd_inverse("Σ₁", &model.process_cov)?;
    let p2 = spd_inverse("Σ₂", &model.obs_cov)?;
    Ok((mu_next - model.transition(mu, u), o - &model.c * mu_next, p1, p2))
}

/// Which of `A`, `B`, `C` [`learn_ssm_step`] updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsmLearnMask {
    pub a: bool,
    pub b: bool,
    pub c: bool,
}

impl Default for SsmLearnMask {
    fn default() -> Self {
        SsmLearnMask { a: true, b: true, c: true }
    }
}

/// Hebbian updates `A += η Σ₁⁻¹ ε_x μᵀ`, `B += η Σ₁⁻¹ ε_x uᵀ`, `C += η Σ₂⁻¹ ε_o μ_{t+1}ᵀ`,
/// each equal to `−η/2` times the gradient of [`ssm_loss`].
pub fn learn_ssm_step(
    mu_next: &Vector,
    mu: &Vector,
    u: &Vector,
    o: &Vector,
    model: &LinearStateSpace,
    lr: f64,
    mask: SsmLearnMask,
) -> Result<LinearStateSpace> {
    let (eps_x, eps_o, p1, p2) = ssm_errors(mu_next, mu, u, o, model)?;
    let wx = p1 * eps_x;
    let wo = p2 * eps_o;
    let mut next = model.clone();
    if mask.a {
        next.a += &wx * mu.transpose() * lr;
    }
    if mask.b {
        next.b += &wx * u.transpose() * lr;
    }
    if mask.c {
        next.c += wo * mu_next.transpose() * lr;
    }
    Ok(next)
}

/// Runs the MAP solver along a trajectory, applying [`learn_ssm_step`] after each step.
pub fn learn_online(
    model: &LinearStateSpace,
    trajectory: &Trajectory,
    init_mean: &Vector,
    lr: f64,
    mask: SsmLearnMask,
    cfg: &PcSolveConfig,
) -> Result<LinearStateSpace> {
    trajectory.check(model)?;
    let mut m = model.clone();
    let mut mu = init_mean.clone();
    for (u, o) in trajectory.controls.iter().zip(&trajectory.observations) {
        let next = pc_linear_solve(&mu, u, o, &m, cfg)?.mean;
        m = learn_ssm_step(&next, &mu, u, o, &m, lr, mask)?;
        mu = next;
    }
    Ok(m)
}

/// Controls and observations, one time step per entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub controls: Vec<Vector>,
    pub observations: Vec<Vector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn check(&self, model: &LinearStateSpace) -> Result<()> {
        ensure_len("controls", self.controls.len(), self.observations.len())?;
        for (u, o) in self.controls.iter().zip(&self.observations) {
            ensure_len("control", u.len(), model.control_dim())?;
            ensure_len("observation", o.len(), model.obs_dim())?;
        }
        Ok(())
    }

    /// Writes a header `u0,..,o0,..` followed by one row per step.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let m = self.controls.first().map_or(0, |u| u.len());
        let p = self.observations.first().map_or(0, |o| o.len());
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (0..m).map(|i| format!("u{i}")).chain((0..p).map(|i| format!("o{i}"))).collect();
        w.write_record(&header)?;
        for (u, o) in self.controls.iter().zip(&self.observations) {
            w.write_record(u.iter().chain(o.iter()).map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Trajectory::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let m = headers.iter().filter(|h| h.starts_with('u')).count();
        if headers.iter().take(m).any(|h| !h.starts_with('u')) || headers.iter().skip(m).any(|h| !h.starts_with('o')) {
            return Err(PcError::Config("trajectory header must list u columns before o columns".into()));
        }
        let mut traj = Trajectory::default();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| PcError::Config(format!("trajectory row {row}: {e}")))?;
            traj.controls.push(Vector::from_column_slice(&vals[..m]));
            traj.observations.push(Vector::from_column_slice(&vals[m..]));
        }
        Ok(traj)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn scalar(a: f64, p1: f64, p2: f64) -> LinearStateSpace {
        LinearStateSpace::new(s(a), s(0.0), s(1.0), s(p1), s(p2)).unwrap()
    }

    #[test]
    fn projection_scalar() {
        let b = BeliefState::new(Vector::from_element(1, 2.0), s(1.0)).unwrap();
        let p = kf_project(&b, &Vector::zeros(1), &scalar(0.5, 0.1, 1.0)).unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-15);
        assert!((p.cov[(0, 0)] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn identity_projection_unchanged() {
        let b = BeliefState::new(Vector::from_element(1, 0.7), s(0.3)).unwrap();
        assert_eq!(kf_project(&b, &Vector::zeros(1), &scalar(1.0, 0.0, 1.0)).unwrap(), b);
    }

    #[test]
    fn equal_information_halves() {
        let m = scalar(1.0, 1.0, 2.0);
        let pred = BeliefState::new(Vector::from_element(1, 1.0), s(2.0)).unwrap();
        let c = kf_correct(&pred, &Vector::from_element(1, 3.0), &m).unwrap();
        assert!((c.mean[0] - 2.0).abs() < 1e-15);
        assert!((c.cov[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_map() {
        let r = pc_linear_solve(
            &Vector::zeros(1),
            &Vector::zeros(1),
            &Vector::from_element(1, 2.0),
            &scalar(1.0, 1.0, 1.0),
            &PcSolveConfig::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert!((r.mean[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unstable_step_rejected() {
        let cfg = PcSolveConfig { step: Some(1.0), ..Default::default() };
        let r = pc_linear_solve(&Vector::zeros(1), &Vector::zeros(1), &Vector::zeros(1), &scalar(1.0, 1.0, 1.0), &cfg);
        assert!(matches!(r, Err(PcError::Argument(_))));
    }

    #[test]
    fn csv_round_trip() {
        let t = Trajectory {
            controls: vec![Vector::from_vec(vec![0.5]), Vector::from_vec(vec![-1.0])],
            observations: vec![Vector::from_vec(vec![1.0, 2.0]), Vector::from_vec(vec![3.25, -0.125])],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("u0,o0,o1\n"));
        assert_eq!(Trajectory::read_csv(buf.as_slice()).unwrap(), t);
    }
}
