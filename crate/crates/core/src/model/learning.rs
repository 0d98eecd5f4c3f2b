use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::inference::{compute_errors, free_energy, predict, run_inference};
use super::{standard_normal_vector, NetworkParams, NetworkSpec, NetworkState};
use crate::activation::Activation;
use crate::error::{PcError, Result};
use crate::linalg::{Matrix, Precision, Vector};
use crate::precision::{learn_precision, PrecisionMode};

/// How unclamped value units are initialised before each E-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MuInit {
    /// Top-down prediction sweep when the top layer is clamped, otherwise a
    /// bottom-up sweep through `θᵀ`.
    #[default]
    FeedforwardSweep,
    /// Independent `scale · N(0, 1)` draws.
    RandomNormal { scale: f64 },
}

impl MuInit {
    pub const DEFAULT_RANDOM_SCALE: f64 = 0.05;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionLearning {
    pub mode: PrecisionMode,
    pub lr: f64,
}

impl Default for PrecisionLearning {
    fn default() -> Self {
        PrecisionLearning { mode: PrecisionMode::Fixed, lr: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningConfig {
    pub weight_lr: f64,
    /// Coefficient λ of an optional `λ‖θ‖²` penalty added to the descended `F/2`; 0 disables it.
    pub weight_decay: f64,
    pub init: MuInit,
    pub precision: PrecisionLearning,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig { weight_lr: 0.05, weight_decay: 0.0, init: MuInit::default(), precision: PrecisionLearning::default() }
    }
}

impl LearningConfig {
    pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
}

/// Sets every unclamped layer according to `init` and refreshes the errors.
pub fn initialize_state<R: Rng + ?Sized>(
    state: &mut NetworkState,
    params: &NetworkParams,
    spec: &NetworkSpec,
    init: MuInit,
    rng: &mut R,
) -> Result<()> {
    state.check(spec)?;
    params.check(spec)?;
    let depth = spec.depth();
    match init {
        MuInit::FeedforwardSweep if state.clamped[depth] => {
            for l in (0..depth).rev() {
                if !state.clamped[l] {
                    state.mu[l] = predict(params, spec, l + 1, &state.mu[l + 1]);
                }
            }
        }
        MuInit::FeedforwardSweep => {
            for l in 1..=depth {
                if !state.clamped[l] {
                    state.mu[l] = params.theta(l).tr_mul(&state.mu[l - 1]);
                }
            }
        }
        MuInit::RandomNormal { scale } => {
            for l in 0..=depth {
                if !state.clamped[l] {
                    state.mu[l] = standard_normal_vector(spec.dim(l), scale, rng);
                }
            }
        }
    }
    compute_errors(state, params, spec)
}

/// Local Hebbian weight kernel: `(f′(θ μ) ⊙ Σ_below⁻¹ ε_below) μᵀ`.
///
/// Only the error and precision of the layer below, the layer's own activity
/// and its own weights enter.
pub fn local_weight_delta(
    eps_below: &Vector,
    precision_below: &Precision,
    mu: &Vector,
    theta: &Matrix,
    activation: Activation,
) -> Matrix {
    let gate = activation.derivative(&(theta * mu));
    let post = gate.component_mul(&precision_below.apply(eps_below));
    post * mu.transpose()
}

/// Weight update directions `−½ ∂F/∂θ_l` for `l = 1..=L`, from cached errors.
pub fn weight_gradients(state: &NetworkState, params: &NetworkParams, spec: &NetworkSpec) -> Result<Vec<Matrix>> {
    state.check(spec)?;
    params.check(spec)?;
    Ok((1..=spec.depth())
        .map(|l| {
            local_weight_delta(&state.eps[l - 1], &params.precision[l - 1], &state.mu[l], params.theta(l), spec.activation(l))
        })
        .collect())
}

/// M-step for a single relaxed item: `θ_l ← θ_l + lr · Δθ_l`.
pub fn weight_step(state: &NetworkState, params: &mut NetworkParams, spec: &NetworkSpec, lr: f64) -> Result<()> {
    let deltas = weight_gradients(state, params, spec)?;
    for (th, d) in params.theta.iter_mut().zip(deltas) {
        *th += d * lr;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub items: usize,
    /// Mean F after the weight update, at the relaxed states.
    pub mean_free_energy: f64,
    /// Mean F at the relaxed states, before the weight update.
    pub mean_relaxed_free_energy: f64,
    pub mean_iterations: f64,
    /// Mean `‖ε_l‖` per layer after the update.
    pub layer_error_norms: Vec<f64>,
}

/// One EM round over pre-clamped states: initialise, relax (in parallel),
/// then apply the averaged weight update once.
pub fn em_step_states<R: Rng + ?Sized>(
    states: &mut [NetworkState],
    params: &mut NetworkParams,
    spec: &NetworkSpec,
    cfg: &LearningConfig,
    rng: &mut R,
) -> Result<EpochReport> {
    if states.is_empty() {
        return Err(PcError::Argument("empty batch".into()));
    }
    for s in states.iter_mut() {
        initialize_state(s, params, spec, cfg.init, rng)?;
    }
    let frozen: &NetworkParams = params;
    let reports = states
        .par_iter_mut()
        .map(|s| run_inference(s, frozen, spec))
        .collect::<Result<Vec<_>>>()?;
    let n = states.len() as f64;
    let mean_relaxed_free_energy = reports.iter().map(|r| r.final_free_energy).sum::<f64>() / n;
    let mean_iterations = reports.iter().map(|r| r.iterations as f64).sum::<f64>() / n;

    let per_item = states
        .par_iter()
        .map(|s| weight_gradients(s, frozen, spec))
        .collect::<Result<Vec<_>>>()?;
    let mut acc: Vec<Matrix> = params.theta.iter().map(|t| Matrix::zeros(t.nrows(), t.ncols())).collect();
    for grads in &per_item {
        for (a, g) in acc.iter_mut().zip(grads) {
            *a += g;
        }
    }
    for (th, a) in params.theta.iter_mut().zip(acc) {
        let mut delta = a / n;
        if cfg.weight_decay > 0.0 {
            delta -= &*th * (2.0 * cfg.weight_decay);
        }
        *th += delta * cfg.weight_lr;
    }

    if cfg.precision.mode != PrecisionMode::Fixed {
        for l in 0..=spec.depth() {
            let errors: Vec<Vector> = states.iter().map(|s| s.eps[l].clone()).collect();
            params.precision[l] = learn_precision(&params.precision[l], &errors, cfg.precision.lr, cfg.precision.mode)?;
        }
    }

    let mut total_f = 0.0;
    let mut norms = vec![0.0; spec.depth() + 1];
    for s in states.iter_mut() {
        compute_errors(s, params, spec)?;
        total_f += free_energy(s, params, spec)?;
        for (acc, e) in norms.iter_mut().zip(&s.eps) {
            *acc += e.norm() / n;
        }
    }
    Ok(EpochReport {
        items: states.len(),
        mean_free_energy: total_f / n,
        mean_relaxed_free_energy,
        mean_iterations,
        layer_error_norms: norms,
    })
}

/// Unsupervised EM over one batch: clamp `μ₀` to each observation, relax,
/// then update the weights with the batch-averaged gradient.
pub fn em_epoch<R: Rng + ?Sized>(
    batch: &[Vector],
    params: &mut NetworkParams,
    spec: &NetworkSpec,
    cfg: &LearningConfig,
    rng: &mut R,
) -> Result<EpochReport> {
    if batch.is_empty() {
        return Err(PcError::Argument("em_epoch needs a non-empty batch".into()));
    }
    let mut states = batch
        .iter()
        .map(|o| {
            let mut s = NetworkState::zeros(spec);
            s.clamp(0, o.clone())?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    em_step_states(&mut states, params, spec, cfg, rng)
}
