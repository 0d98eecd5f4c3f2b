//! Biologically motivated relaxations of the standard update rules.
//!
//! * `use_psi`: the backward message to `μ_l` goes through learned weights
//!   `ψ_l` (`d_l × d_{l-1}`) instead of `θ_lᵀ`.
//! * `drop_derivative`: the `f′` gate is removed from the value and weight updates.
//! * `use_zeta`: errors become `ε_l = μ_l − ζ_l f(θ_{l+1} μ_{l+1})` with a learned
//!   `d_l × d_l` matrix `ζ_l`.
//!
//! Composition within one EM round: errors (with `ζ`), then inference (with
//! `ψ` and the derivative flag), then all weight updates in a single M-step.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, shape_err, PcError, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{initialize_state, EpochReport, InferenceReport, LearningConfig, NetworkParams, NetworkSpec, NetworkState};
use crate::precision::{learn_precision, PrecisionMode};

/// Half-width of the uniform `ψ` initialisation.
pub const PSI_INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxationFlags {
    pub use_psi: bool,
    pub drop_derivative: bool,
    pub use_zeta: bool,
}

/// Learning rule for `ζ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZetaRule {
    /// `Δζ_l = (Σ_l⁻¹ ε_l) f(θ_{l+1} μ_{l+1})ᵀ`, descending F/2.
    #[default]
    Gradient,
    /// `Δζ_l = μ_l ε_lᵀ`.
    Hebbian,
}

/// Relaxation flags together with the extra weights they require.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedNetwork {
    pub flags: RelaxationFlags,
    /// `psi[l - 1]` is `ψ_l` for `l = 1..=L`; present iff `use_psi`.
    pub psi: Option<Vec<Matrix>>,
    /// `zeta[l]` is `ζ_l` for `l = 0..L`; present iff `use_zeta`.
    pub zeta: Option<Vec<Matrix>>,
    pub zeta_rule: ZetaRule,
}

impl RelaxedNetwork {
    /// `ψ` uniform in `[−0.05, 0.05]`, `ζ = I`.
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, flags: RelaxationFlags, rng: &mut R) -> Self {
        let dims = &spec.layer_dims;
        let dist = Uniform::new_inclusive(-PSI_INIT_SCALE, PSI_INIT_SCALE).expect("finite bound");
        let psi = flags
            .use_psi
            .then(|| (1..dims.len()).map(|l| Matrix::from_fn(dims[l], dims[l - 1], |_, _| dist.sample(rng))).collect());
        let zeta = flags.use_zeta.then(|| dims[..spec.depth()].iter().map(|&d| Matrix::identity(d, d)).collect());
        RelaxedNetwork { flags, psi, zeta, zeta_rule: ZetaRule::default() }
    }

    /// The unrelaxed network: every rule reduces to the standard one.
    pub fn standard() -> Self {
        RelaxedNetwork { flags: RelaxationFlags::default(), psi: None, zeta: None, zeta_rule: ZetaRule::default() }
    }

    pub fn with_zeta_rule(mut self, rule: ZetaRule) -> Self {
        self.zeta_rule = rule;
        self
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let dims = &spec.layer_dims;
        if self.psi.is_some() != self.flags.use_psi || self.zeta.is_some() != self.flags.use_zeta {
            return Err(PcError::Argument("ψ/ζ must be allocated exactly when their flags are set".into()));
        }
        if let Some(psi) = &self.psi {
            ensure_len("psi", psi.len(), spec.depth())?;
            for (k, p) in psi.iter().enumerate() {
                if p.shape() != (dims[k + 1], dims[k]) {
                    return Err(shape_err(format!("psi_{}: expected {}x{}", k + 1, dims[k + 1], dims[k])));
                }
            }
        }
        if let Some(zeta) = &self.zeta {
            ensure_len("zeta", zeta.len(), spec.depth())?;
            for (l, z) in zeta.iter().enumerate() {
                if z.shape() != (dims[l], dims[l]) {
                    return Err(shape_err(format!("zeta_{l}: expected {0}x{0}", dims[l])));
                }
            }
        }
        Ok(())
    }

    /// Alignment angle in radians between `ψ_l` and `θ_lᵀ`.
    pub fn psi_alignment(&self, params: &NetworkParams, l: usize) -> Option<f64> {
        let psi = &self.psi.as_ref()?[l - 1];
        let t = params.theta(l).transpose();
        let cos = psi.dot(&t) / (psi.norm() * t.norm());
        Some(cos.clamp(-1.0, 1.0).acos())
    }
}

/// `μ_l − ζ_l · prediction`.
pub fn zeta_error(mu: &Vector, prediction: &Vector, zeta: &Matrix) -> Result<Vector> {
    if zeta.shape() != (mu.len(), mu.len()) || prediction.len() != mu.len() {
        return Err(shape_err("zeta must be square and match μ and the prediction"));
    }
    Ok(mu - zeta * prediction)
}

/// Literal Hebbian rule `ζ + η μ εᵀ`.
pub fn zeta_step(zeta: &Matrix, mu: &Vector, eps: &Vector, lr: f64) -> Result<Matrix> {
    if zeta.shape() != (mu.len(), eps.len()) {
        return Err(shape_err("zeta shape does not match μ and ε"));
    }
    Ok(zeta + mu * eps.transpose() * lr)
}

/// `ψ + η μ wᵀ`, where `w` is the (optionally gated) precision-weighted error of the layer below.
pub fn psi_step(psi: &Matrix, mu: &Vector, weighted_eps_below: &Vector, lr: f64) -> Result<Matrix> {
    if psi.shape() != (mu.len(), weighted_eps_below.len()) {
        return Err(shape_err("psi shape does not match μ and ε"));
    }
    Ok(psi + mu * weighted_eps_below.transpose() * lr)
}

/// Cached pre-activations for one relaxation run; clamped sources are computed once.
struct Cache<'a> {
    params: &'a NetworkParams,
    spec: &'a NetworkSpec,
    net: &'a RelaxedNetwork,
    pre: Vec<Vector>,
}

impl<'a> Cache<'a> {
    fn new(state: &NetworkState, params: &'a NetworkParams, spec: &'a NetworkSpec, net: &'a RelaxedNetwork) -> Self {
        let pre = (1..=spec.depth()).map(|l| params.theta(l) * &state.mu[l]).collect();
        Cache { params, spec, net, pre }
    }

    fn refresh(&mut self, state: &NetworkState) {
        for l in 1..=self.spec.depth() {
            if !state.clamped[l] {
                self.pre[l - 1] = self.params.theta(l) * &state.mu[l];
            }
        }
    }

    fn prediction(&self, l: usize) -> Vector {
        self.spec.activation(l + 1).apply(&self.pre[l])
    }

    fn write_errors(&self, state: &mut NetworkState) {
        let depth = self.spec.depth();
        for l in 0..depth {
            let pred = self.prediction(l);
            state.eps[l] = match &self.net.zeta {
                Some(z) => &state.mu[l] - &z[l] * pred,
                None => &state.mu[l] - pred,
            };
        }
        state.eps[depth] = &state.mu[depth] - &self.spec.prior_mean;
    }

    /// `f′ ⊙ (ζᵀ Σ⁻¹ ε)` of layer `l - 1`; `ζ` only when enabled, the gate
    /// only when derivatives are kept.
    fn message_below(&self, state: &NetworkState, l: usize) -> Vector {
        let mut w = self.params.precision[l - 1].apply(&state.eps[l - 1]);
        if let Some(z) = &self.net.zeta {
            w = z[l - 1].tr_mul(&w);
        }
        if self.net.flags.drop_derivative {
            w
        } else {
            self.spec.activation(l).derivative(&self.pre[l - 1]).component_mul(&w)
        }
    }

    fn direction(&self, state: &NetworkState, l: usize) -> Vector {
        let own = self.params.precision[l].apply(&state.eps[l]);
        if l == 0 {
            return -own;
        }
        let msg = self.message_below(state, l);
        let up = match &self.net.psi {
            Some(psi) => &psi[l - 1] * msg,
            None => self.params.theta(l).tr_mul(&msg),
        };
        up - own
    }

    fn step(&mut self, state: &mut NetworkState) -> f64 {
        let eta = self.spec.step_size;
        let dirs: Vec<Option<Vector>> =
            (0..state.mu.len()).map(|l| (!state.clamped[l]).then(|| self.direction(state, l))).collect();
        let mut change = 0.0f64;
        for (l, d) in dirs.into_iter().enumerate() {
            if let Some(d) = d {
                let delta = d * eta;
                change = change.max(delta.amax());
                state.mu[l] += delta;
            }
        }
        self.refresh(state);
        self.write_errors(state);
        change
    }
}

fn energy(state: &NetworkState, params: &NetworkParams) -> f64 {
    state.eps.iter().zip(&params.precision).map(|(e, p)| p.quad_form(e) + p.log_det_2pi_cov()).sum()
}

fn check_all(state: &NetworkState, params: &NetworkParams, spec: &NetworkSpec, net: &RelaxedNetwork) -> Result<()> {
    params.check(spec)?;
    net.check(spec)?;
    ensure_len("state layers", state.mu.len(), spec.layer_dims.len())?;
    for (l, &d) in spec.layer_dims.iter().enumerate() {
        ensure_len(&format!("mu[{l}]"), state.mu[l].len(), d)?;
    }
    Ok(())
}

/// Recomputes the errors, with `ζ` when enabled.
pub fn relaxed_errors(state: &mut NetworkState, params: &NetworkParams, spec: &NetworkSpec, net: &RelaxedNetwork) -> Result<()> {
    check_all(state, params, spec, net)?;
    Cache::new(state, params, spec, net).write_errors(state);
    Ok(())
}

/// F evaluated with the relaxed errors.
pub fn relaxed_free_energy(state: &mut NetworkState, params: &NetworkParams, spec: &NetworkSpec, net: &RelaxedNetwork) -> Result<f64> {
    relaxed_errors(state, params, spec, net)?;
    Ok(energy(state, params))
}

/// One Euler step of the relaxed value dynamics on every unclamped layer.
pub fn relaxed_infer_step(state: &mut NetworkState, params: &NetworkParams, spec: &NetworkSpec, net: &RelaxedNetwork) -> Result<()> {
    check_all(state, params, spec, net)?;
    let mut cache = Cache::new(state, params, spec, net);
    cache.write_errors(state);
    cache.step(state);
    Ok(())
}

/// Iterates [`relaxed_infer_step`] to convergence under the spec's tolerances.
pub fn relaxed_run_inference(
    state: &mut NetworkState,
    params: &NetworkParams,
    spec: &NetworkSpec,
    net: &RelaxedNetwork,
) -> Result<InferenceReport> {
    check_all(state, params, spec, net)?;
    let mut cache = Cache::new(state, params, spec, net);
    cache.write_errors(state);
    let initial_free_energy = energy(state, params);
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < spec.max_iters {
        iterations += 1;
        last_change = cache.step(state);
        if let Some(l) = (0..state.mu.len()).find(|&l| {
            state.mu[l].iter().chain(state.eps[l].iter()).any(|v| !v.is_finite() || v.abs() > spec.divergence_bound)
        }) {
            return Err(PcError::Divergence { location: format!("layer {l}"), iteration: iterations });
        }
        if last_change < spec.tol {
            converged = true;
            break;
        }
    }
    Ok(InferenceReport { iterations, converged, initial_free_energy, final_free_energy: energy(state, params), last_change })
}

/// Update directions for `θ`, `ψ` and `ζ` from a relaxed state with fresh errors.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedDeltas {
    pub theta: Vec<Matrix>,
    pub psi: Option<Vec<Matrix>>,
    pub zeta: Option<Vec<Matrix>>,
}

pub fn relaxed_deltas(state: &NetworkState, params: &NetworkParams, spec: &NetworkSpec, net: &RelaxedNetwork) -> Result<RelaxedDeltas> {
    check_all(state, params, spec, net)?;
    let cache = Cache::new(state, params, spec, net);
    let depth = spec.depth();
    let msgs: Vec<Vector> = (1..=depth).map(|l| cache.message_below(state, l)).collect();
    let theta = msgs.iter().enumerate().map(|(k, m)| m * state.mu[k + 1].transpose()).collect();
    let psi = net.psi.as_ref().map(|_| (1..=depth).map(|l| &state.mu[l] * msgs[l - 1].transpose()).collect());
    let zeta = net.zeta.as_ref().map(|_| {
        (0..depth)
            .map(|l| match net.zeta_rule {
                ZetaRule::Gradient => params.precision[l].apply(&state.eps[l]) * cache.prediction(l).transpose(),
                ZetaRule::Hebbian => &state.mu[l] * state.eps[l].transpose(),
            })
            .collect()
    });
    Ok(RelaxedDeltas { theta, psi, zeta })
}

/// One EM round with the relaxed rules: initialise, relax, then a single
/// averaged update of `θ`, `ψ` and `ζ` (and precisions if learned).
pub fn relaxed_em_step_states<R: Rng + ?Sized>(
    states: &mut [NetworkState],
    params: &mut NetworkParams,
    net: &mut RelaxedNetwork,
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
    let (frozen_p, frozen_n): (&NetworkParams, &RelaxedNetwork) = (params, net);
    let reports = states
        .par_iter_mut()
        .map(|s| relaxed_run_inference(s, frozen_p, spec, frozen_n))
        .collect::<Result<Vec<_>>>()?;
    let n = states.len() as f64;
    let per_item = states
        .par_iter()
        .map(|s| relaxed_deltas(s, frozen_p, spec, frozen_n))
        .collect::<Result<Vec<_>>>()?;

    let mut sum = per_item[0].clone();
    for d in &per_item[1..] {
        add_all(&mut sum.theta, &d.theta);
        if let (Some(a), Some(b)) = (&mut sum.psi, &d.psi) {
            add_all(a, b);
        }
        if let (Some(a), Some(b)) = (&mut sum.zeta, &d.zeta) {
            add_all(a, b);
        }
    }
    let lr = cfg.weight_lr / n;
    for (th, d) in params.theta.iter_mut().zip(&sum.theta) {
        let decay = &*th * (2.0 * cfg.weight_decay * cfg.weight_lr);
        *th += d * lr - decay;
    }
    if let (Some(psi), Some(d)) = (&mut net.psi, &sum.psi) {
        psi.iter_mut().zip(d).for_each(|(p, d)| *p += d * lr);
    }
    if let (Some(zeta), Some(d)) = (&mut net.zeta, &sum.zeta) {
        zeta.iter_mut().zip(d).for_each(|(z, d)| *z += d * lr);
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
        total_f += relaxed_free_energy(s, params, spec, net)?;
        for (acc, e) in norms.iter_mut().zip(&s.eps) {
            *acc += e.norm() / n;
        }
    }
    Ok(EpochReport {
        items: states.len(),
        mean_free_energy: total_f / n,
        mean_relaxed_free_energy: reports.iter().map(|r| r.final_free_energy).sum::<f64>() / n,
        mean_iterations: reports.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
        layer_error_norms: norms,
    })
}

fn add_all(acc: &mut [Matrix], other: &[Matrix]) {
    acc.iter_mut().zip(other).for_each(|(a, b)| *a += b);
}

/// Downward sweep `μ_{l-1} = ζ_{l-1} f_l(θ_l μ_l)` (without `ζ` when disabled).
pub fn relaxed_downward_sweep(params: &NetworkParams, spec: &NetworkSpec, net: &RelaxedNetwork, top: &Vector) -> Result<Vector> {
    ensure_len("sweep source", top.len(), spec.dim(spec.depth()))?;
    let mut v = top.clone();
    for l in (1..=spec.depth()).rev() {
        v = spec.activation(l).apply(&(params.theta(l) * v));
        if let Some(z) = &net.zeta {
            v = &z[l - 1] * v;
        }
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(PcError::Divergence { location: "prediction sweep".into(), iteration: 0 });
    }
    Ok(v)
}
