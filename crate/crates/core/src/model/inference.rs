use super::{NetworkParams, NetworkSpec, NetworkState};
use crate::error::{PcError, Result};
use crate::linalg::Vector;

/// `f_l(θ_l μ_l)`: layer `l`'s prediction of layer `l - 1`.
pub fn predict(params: &NetworkParams, spec: &NetworkSpec, l: usize, mu: &Vector) -> Vector {
    spec.activation(l).apply(&(params.theta(l) * mu))
}

/// Pre-activations `θ_l μ_l`, cached across relaxation steps.
///
/// Entries whose source layer is clamped never change during relaxation, so
/// only the free layers are refreshed after each step.
pub(crate) struct Relaxation<'a> {
    params: &'a NetworkParams,
    spec: &'a NetworkSpec,
    pre: Vec<Vector>,
}

impl<'a> Relaxation<'a> {
    pub(crate) fn new(state: &NetworkState, params: &'a NetworkParams, spec: &'a NetworkSpec) -> Self {
        let pre = (1..=spec.depth()).map(|l| params.theta(l) * &state.mu[l]).collect();
        Relaxation { params, spec, pre }
    }

    fn refresh_free(&mut self, state: &NetworkState) {
        for l in 1..=self.spec.depth() {
            if !state.clamped[l] {
                self.pre[l - 1] = self.params.theta(l) * &state.mu[l];
            }
        }
    }

    fn write_errors(&self, state: &mut NetworkState) {
        let depth = self.spec.depth();
        for l in 0..depth {
            let pred = self.spec.activation(l + 1).apply(&self.pre[l]);
            state.eps[l] = &state.mu[l] - pred;
        }
        state.eps[depth] = &state.mu[depth] - &self.spec.prior_mean;
    }

    /// `θ_lᵀ (f′(θ_l μ_l) ⊙ Σ_{l-1}⁻¹ ε_{l-1}) − Σ_l⁻¹ ε_l`, the descent direction on F/2.
    fn direction(&self, state: &NetworkState, l: usize) -> Vector {
        let own = self.params.precision[l].apply(&state.eps[l]);
        if l == 0 {
            return -own;
        }
        let weighted_below = self.params.precision[l - 1].apply(&state.eps[l - 1]);
        let gated = self.spec.activation(l).derivative(&self.pre[l - 1]).component_mul(&weighted_below);
        self.params.theta(l).tr_mul(&gated) - own
    }
}

/// Recomputes every `ε_l` from `μ` and the parameters.
pub fn compute_errors(state: &mut NetworkState, params: &NetworkParams, spec: &NetworkSpec) -> Result<()> {
    state.check(spec)?;
    params.check(spec)?;
    Relaxation::new(state, params, spec).write_errors(state);
    Ok(())
}

/// Per-layer contributions `ε_lᵀ Σ_l⁻¹ ε_l + ln det(2π Σ_l)`, from the cached errors.
pub fn free_energy_terms(state: &NetworkState, params: &NetworkParams, spec: &NetworkSpec) -> Result<Vec<f64>> {
    state.check(spec)?;
    params.check(spec)?;
    Ok(state
        .eps
        .iter()
        .zip(&params.precision)
        .map(|(e, p)| p.quad_form(e) + p.log_det_2pi_cov())
        .collect())
}

/// `F = Σ_l [ε_lᵀ Σ_l⁻¹ ε_l + ln det(2π Σ_l)]` over `l = 0..=L`; expects fresh errors.
pub fn free_energy(state: &NetworkState, params: &NetworkParams, spec: &NetworkSpec) -> Result<f64> {
    Ok(free_energy_terms(state, params, spec)?.iter().sum())
}

/// The value-unit update direction for every layer (clamped layers included),
/// equal to `−½ ∂F/∂μ_l`. Uses the cached errors.
pub fn mu_update_direction(state: &NetworkState, params: &NetworkParams, spec: &NetworkSpec) -> Result<Vec<Vector>> {
    state.check(spec)?;
    params.check(spec)?;
    let relax = Relaxation::new(state, params, spec);
    Ok((0..=spec.depth()).map(|l| relax.direction(state, l)).collect())
}

/// One Euler step on every unclamped layer, followed by an error refresh.
pub fn infer_step(state: &mut NetworkState, params: &NetworkParams, spec: &NetworkSpec) -> Result<()> {
    state.check(spec)?;
    params.check(spec)?;
    let mut relax = Relaxation::new(state, params, spec);
    relax.write_errors(state);
    euler_step(&mut relax, state);
    Ok(())
}

fn euler_step(relax: &mut Relaxation<'_>, state: &mut NetworkState) -> f64 {
    let eta = relax.spec.step_size;
    let dirs: Vec<Option<Vector>> = (0..state.mu.len())
        .map(|l| (!state.clamped[l]).then(|| relax.direction(state, l)))
        .collect();
    let mut max_change = 0.0f64;
    for (l, dir) in dirs.into_iter().enumerate() {
        if let Some(d) = dir {
            let delta = d * eta;
            max_change = max_change.max(delta.amax());
            state.mu[l] += delta;
        }
    }
    relax.refresh_free(state);
    relax.write_errors(state);
    max_change
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceReport {
    pub iterations: usize,
    pub converged: bool,
    pub initial_free_energy: f64,
    pub final_free_energy: f64,
    /// Max-norm of the μ change in the last iteration.
    pub last_change: f64,
}

/// E-step: iterate [`infer_step`] until the max-norm μ change drops below
/// `spec.tol` or `spec.max_iters` is reached.
pub fn run_inference(state: &mut NetworkState, params: &NetworkParams, spec: &NetworkSpec) -> Result<InferenceReport> {
    run_inference_observed(state, params, spec, |_, _| {})
}

/// As [`run_inference`], calling `observe(iteration, state)` after every step.
pub fn run_inference_observed(
    state: &mut NetworkState,
    params: &NetworkParams,
    spec: &NetworkSpec,
    mut observe: impl FnMut(usize, &NetworkState),
) -> Result<InferenceReport> {
    state.check(spec)?;
    params.check(spec)?;
    let mut relax = Relaxation::new(state, params, spec);
    relax.write_errors(state);
    check_finite(state, spec, 0)?;
    let initial_free_energy = free_energy(state, params, spec)?;

    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < spec.max_iters {
        iterations += 1;
        last_change = euler_step(&mut relax, state);
        check_finite(state, spec, iterations)?;
        observe(iterations, state);
        if last_change < spec.tol {
            converged = true;
            break;
        }
    }
    let final_free_energy = free_energy(state, params, spec)?;
    if !final_free_energy.is_finite() {
        return Err(divergence_at(state, spec, iterations));
    }
    Ok(InferenceReport { iterations, converged, initial_free_energy, final_free_energy, last_change })
}

fn check_finite(state: &NetworkState, spec: &NetworkSpec, iteration: usize) -> Result<()> {
    let bad = |v: &Vector| v.iter().any(|x| !x.is_finite() || x.abs() > spec.divergence_bound);
    if state.mu.iter().chain(&state.eps).any(bad) {
        return Err(divergence_at(state, spec, iteration));
    }
    Ok(())
}

fn divergence_at(state: &NetworkState, spec: &NetworkSpec, iteration: usize) -> PcError {
    let bad = |v: &Vector| v.iter().any(|x| !x.is_finite() || x.abs() > spec.divergence_bound);
    let layer = (0..state.mu.len()).find(|&l| bad(&state.mu[l]) || bad(&state.eps[l])).unwrap_or(0);
    PcError::Divergence { location: format!("layer {layer}"), iteration }
}
