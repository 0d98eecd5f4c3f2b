//! Hierarchical Gaussian generative model with value and error units.
//!
//! Index conventions used throughout the crate:
//!
//! | symbol  | meaning                                                        |
//! |---------|----------------------------------------------------------------|
//! | `μ_l`   | value units of layer `l`, `l = 0..=L`; layer 0 is the data      |
//! | `θ_l`   | `d_{l-1} × d_l` weights mapping layer `l` to its prediction of `l-1` |
//! | `f_l`   | activation applied in that prediction, `f_l(θ_l μ_l)`           |
//! | `ε_l`   | `μ_l − f_{l+1}(θ_{l+1} μ_{l+1})` for `l < L`, `μ_L − μ̄` at the top |
//! | `Σ_l⁻¹` | precision weighting `ε_l`; the top layer has its own            |
//!
//! The free energy keeps the un-halved form
//! `F = Σ_l [ε_lᵀ Σ_l⁻¹ ε_l + ln det(2π Σ_l)]`. Every update rule in the crate
//! descends `F/2`, so an update direction equals `−½ ∇F`.

mod competition;
mod inference;
mod laplace;
mod learning;

pub use competition::biased_competition_step;
pub use inference::{
    compute_errors, free_energy, free_energy_terms, infer_step, mu_update_direction, predict, run_inference,
    run_inference_observed, InferenceReport,
};
pub use laplace::{laplace_free_energy, laplace_objective, optimal_variances, LaplaceFreeEnergy};
pub use learning::{
    em_epoch, em_step_states, initialize_state, local_weight_delta, weight_gradients, weight_step, EpochReport,
    LearningConfig, MuInit, PrecisionLearning,
};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{ensure_len, shape_err, PcError, Result};
use crate::linalg::{Matrix, Precision, Vector};

/// Architecture and relaxation settings of a predictive coding network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `d_0..=d_L`; layer 0 is the observation layer.
    pub layer_dims: Vec<usize>,
    /// `activations[l - 1]` is `f_l`, used in the prediction `f_l(θ_l μ_l)`.
    pub activations: Vec<Activation>,
    /// Prior mean `μ̄` of the top layer.
    pub prior_mean: Vector,
    /// Euler step η for the value dynamics.
    pub step_size: f64,
    pub max_iters: usize,
    /// Convergence threshold on the max-norm of the per-iteration μ change.
    pub tol: f64,
    /// Any |μ| above this counts as divergence.
    pub divergence_bound: f64,
}

impl NetworkSpec {
    pub const DEFAULT_STEP: f64 = 0.1;
    pub const DEFAULT_MAX_ITERS: usize = 500;
    pub const DEFAULT_TOL: f64 = 1e-6;

    /// Same activation on every layer, zero prior, default relaxation settings.
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let depth = layer_dims.len().saturating_sub(1);
        let top = layer_dims.last().copied().unwrap_or(0);
        let spec = NetworkSpec {
            activations: vec![activation; depth],
            prior_mean: Vector::zeros(top),
            layer_dims,
            step_size: Self::DEFAULT_STEP,
            max_iters: Self::DEFAULT_MAX_ITERS,
            tol: Self::DEFAULT_TOL,
            divergence_bound: 1e12,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_activations(mut self, activations: Vec<Activation>) -> Result<Self> {
        self.activations = activations;
        self.validate()?;
        Ok(self)
    }

    pub fn with_prior_mean(mut self, prior_mean: Vector) -> Result<Self> {
        self.prior_mean = prior_mean;
        self.validate()?;
        Ok(self)
    }

    pub fn with_step_size(mut self, step: f64) -> Result<Self> {
        self.step_size = step;
        self.validate()?;
        Ok(self)
    }

    pub fn with_max_iters(mut self, n: usize) -> Result<Self> {
        self.max_iters = n;
        self.validate()?;
        Ok(self)
    }

    pub fn with_tol(mut self, tol: f64) -> Result<Self> {
        self.tol = tol;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(PcError::Argument("network needs at least one latent layer (L ≥ 1)".into()));
        }
        if self.layer_dims.contains(&0) {
            return Err(PcError::Argument("layer dimensions must be positive".into()));
        }
        ensure_len("activations", self.activations.len(), self.depth())?;
        ensure_len("prior_mean", self.prior_mean.len(), self.layer_dims[self.depth()])?;
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(PcError::Argument(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.tol > 0.0) {
            return Err(PcError::Argument(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(PcError::Argument("max_iters must be positive".into()));
        }
        Ok(())
    }

    /// Number of latent layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn dim(&self, layer: usize) -> usize {
        self.layer_dims[layer]
    }

    /// `f_l` for `l in 1..=L`.
    pub fn activation(&self, l: usize) -> Activation {
        self.activations[l - 1]
    }

    pub fn is_linear(&self) -> bool {
        self.activations.iter().all(|a| a.is_linear())
    }
}

/// Value units, cached errors and the clamp mask.
///
/// `eps` is a cache: it is always recomputable from `mu` and the parameters
/// via [`compute_errors`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub mu: Vec<Vector>,
    pub eps: Vec<Vector>,
    pub clamped: Vec<bool>,
}

impl NetworkState {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        NetworkState {
            mu: spec.layer_dims.iter().map(|&d| Vector::zeros(d)).collect(),
            eps: spec.layer_dims.iter().map(|&d| Vector::zeros(d)).collect(),
            clamped: vec![false; spec.layer_dims.len()],
        }
    }

    /// Fixes layer `layer` to `value`; clamped layers are never updated by inference.
    pub fn clamp(&mut self, layer: usize, value: Vector) -> Result<()> {
        let slot = self
            .mu
            .get_mut(layer)
            .ok_or_else(|| shape_err(format!("layer {layer} does not exist")))?;
        ensure_len(&format!("clamp value for layer {layer}"), value.len(), slot.len())?;
        *slot = value;
        self.clamped[layer] = true;
        Ok(())
    }

    pub fn release(&mut self, layer: usize) {
        self.clamped[layer] = false;
    }

    pub fn clamped_layers(&self) -> Vec<usize> {
        self.clamped.iter().enumerate().filter(|(_, c)| **c).map(|(i, _)| i).collect()
    }

    pub fn top(&self) -> &Vector {
        self.mu.last().expect("state has layers")
    }

    pub(crate) fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let n = spec.layer_dims.len();
        ensure_len("state layers", self.mu.len(), n)?;
        ensure_len("error layers", self.eps.len(), n)?;
        ensure_len("clamp mask", self.clamped.len(), n)?;
        for (l, &d) in spec.layer_dims.iter().enumerate() {
            ensure_len(&format!("mu[{l}]"), self.mu[l].len(), d)?;
            ensure_len(&format!("eps[{l}]"), self.eps[l].len(), d)?;
        }
        Ok(())
    }
}

/// Generative weights and per-layer precisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// `theta[l - 1]` is `θ_l` (shape `d_{l-1} × d_l`).
    pub theta: Vec<Matrix>,
    /// `precision[l]` is `Σ_l⁻¹` for `l = 0..=L`.
    pub precision: Vec<Precision>,
}

impl NetworkParams {
    /// Zero weights, identity precisions.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let dims = &spec.layer_dims;
        NetworkParams {
            theta: (1..dims.len()).map(|l| Matrix::zeros(dims[l - 1], dims[l])).collect(),
            precision: dims.iter().map(|&d| Precision::identity(d)).collect(),
        }
    }

    /// Uniform Glorot-style initialisation, identity precisions.
    pub fn random<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        for th in p.theta.iter_mut() {
            let bound = (6.0 / (th.nrows() + th.ncols()) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            th.iter_mut().for_each(|w| *w = dist.sample(rng));
        }
        p
    }

    /// `θ_l` for `l in 1..=L`.
    pub fn theta(&self, l: usize) -> &Matrix {
        &self.theta[l - 1]
    }

    pub fn theta_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.theta[l - 1]
    }

    pub fn set_theta(&mut self, l: usize, m: Matrix) -> Result<()> {
        let cur = self.theta(l);
        if cur.shape() != m.shape() {
            return Err(shape_err(format!("theta_{l}: expected {:?}, got {:?}", cur.shape(), m.shape())));
        }
        self.theta[l - 1] = m;
        Ok(())
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let dims = &spec.layer_dims;
        ensure_len("theta", self.theta.len(), spec.depth())?;
        ensure_len("precision", self.precision.len(), dims.len())?;
        for l in 1..dims.len() {
            let th = &self.theta[l - 1];
            if th.shape() != (dims[l - 1], dims[l]) {
                return Err(shape_err(format!(
                    "theta_{l}: expected {}x{}, got {}x{}",
                    dims[l - 1],
                    dims[l],
                    th.nrows(),
                    th.ncols()
                )));
            }
        }
        for (l, p) in self.precision.iter().enumerate() {
            ensure_len(&format!("precision[{l}]"), p.dim(), dims[l])?;
        }
        Ok(())
    }
}

pub(crate) fn standard_normal_vector<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vector {
    DVector::from_iterator(n, (0..n).map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal)))
}
