//! Free energy under a Gaussian (Laplace) variational density.
//!
//! Each layer term `ln p(x_l | x_{l+1})` is expanded to second order around
//! `μ_l`. With `q = N(μ, σ)` the un-halved objective becomes
//!
//! ```text
//! J(σ) = Σ_l [ E_l(μ) + tr(H_l σ_l) − ln det(2π e σ_l) ]
//! ```
//!
//! where `E_l = ε_lᵀ Σ_l⁻¹ ε_l + ln det(2π Σ_l)` and `H_l = −∂² ln p_l / ∂x_l²`.
//! The stationary point is `σ_l = H_l⁻¹`; substituting it leaves
//! `Σ_l ε_lᵀ Σ_l⁻¹ ε_l`, which differs from the point-mass free energy only by
//! the μ-independent constant `Σ_l ln det(2π Σ_l)`.

use super::inference::{compute_errors, free_energy};
use super::{NetworkParams, NetworkSpec, NetworkState};
use crate::error::{ensure_len, PcError, Result};
use crate::linalg::{spd_inverse, spd_log_det, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceFreeEnergy {
    /// `J(σ*)`.
    pub value: f64,
    /// `σ*_l` for every layer.
    pub optimal_variances: Vec<Matrix>,
    /// `Σ_l ln det(2π Σ_l)`; `value + alignment` equals the point-mass F.
    pub alignment: f64,
}

impl LaplaceFreeEnergy {
    pub fn aligned(&self) -> f64 {
        self.value + self.alignment
    }
}

fn require_linear(spec: &NetworkSpec) -> Result<()> {
    if spec.is_linear() {
        Ok(())
    } else {
        Err(PcError::Unsupported("the Laplace expansion is only exact for identity activations".into()))
    }
}

/// Curvature `−∂² ln p(x_l | x_{l+1}) / ∂x_l²` of every layer term.
///
/// `ε_l` depends on `x_l` with unit Jacobian, so the curvature is `Σ_l⁻¹`.
fn curvatures(params: &NetworkParams) -> Vec<Matrix> {
    params.precision.iter().map(|p| p.to_matrix()).collect()
}

/// Optimal variational covariances `σ_l = H_l⁻¹`.
pub fn optimal_variances(params: &NetworkParams, spec: &NetworkSpec) -> Result<Vec<Matrix>> {
    require_linear(spec)?;
    params.check(spec)?;
    curvatures(params).iter().map(|h| spd_inverse("layer curvature", h)).collect()
}

/// The expanded objective `J(σ)` for arbitrary variational covariances.
pub fn laplace_objective(
    state: &NetworkState,
    params: &NetworkParams,
    spec: &NetworkSpec,
    variances: &[Matrix],
) -> Result<f64> {
    require_linear(spec)?;
    ensure_len("variances", variances.len(), spec.layer_dims.len())?;
    let mut state = state.clone();
    compute_errors(&mut state, params, spec)?;
    let point = free_energy(&state, params, spec)?;
    let two_pi_e = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let mut total = point;
    for ((h, s), &d) in curvatures(params).iter().zip(variances).zip(&spec.layer_dims) {
        if s.shape() != (d, d) {
            return Err(PcError::Shape(format!("variance must be {d}x{d}")));
        }
        total += (h * s).trace() - (d as f64 * two_pi_e + spd_log_det("variational covariance", s)?);
    }
    Ok(total)
}

/// Free energy along the Laplace route, evaluated at the optimal variances.
pub fn laplace_free_energy(state: &NetworkState, params: &NetworkParams, spec: &NetworkSpec) -> Result<LaplaceFreeEnergy> {
    let optimal = optimal_variances(params, spec)?;
    let value = laplace_objective(state, params, spec, &optimal)?;
    let alignment = params.precision.iter().map(|p| p.log_det_2pi_cov()).sum();
    Ok(LaplaceFreeEnergy { value, optimal_variances: optimal, alignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::linalg::Vector;

    #[test]
    fn unit_precision_gives_unit_variance() {
        let spec = NetworkSpec::new(vec![1, 1], Activation::Identity).unwrap();
        let params = NetworkParams::zeros(&spec);
        let v = optimal_variances(&params, &spec).unwrap();
        assert!(v.iter().all(|m| (m[(0, 0)] - 1.0).abs() < 1e-15));
    }

    #[test]
    fn nonlinear_rejected() {
        let spec = NetworkSpec::new(vec![2, 2], Activation::Tanh).unwrap();
        let params = NetworkParams::zeros(&spec);
        let state = NetworkState::zeros(&spec);
        assert!(matches!(laplace_free_energy(&state, &params, &spec), Err(PcError::Unsupported(_))));
    }

    #[test]
    fn optimum_is_a_minimum() {
        let spec = NetworkSpec::new(vec![1, 1], Activation::Identity).unwrap();
        let mut params = NetworkParams::zeros(&spec);
        params.theta[0][(0, 0)] = 0.7;
        let mut state = NetworkState::zeros(&spec);
        state.mu[0] = Vector::from_element(1, 1.3);
        state.mu[1] = Vector::from_element(1, -0.4);
        let best = laplace_free_energy(&state, &params, &spec).unwrap();
        for scale in [0.5, 0.9, 1.1, 2.0] {
            let vs: Vec<Matrix> = best.optimal_variances.iter().map(|m| m * scale).collect();
            assert!(laplace_objective(&state, &params, &spec, &vs).unwrap() > best.value);
        }
    }
}
