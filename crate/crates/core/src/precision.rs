//! Precision dynamics and their fixed point, plus Fisher-information checks.
//!
//! The covariance ODE is `dΣ/dt = ε̃ε̃ᵀ − Σ` with `ε̃ = Σ⁻¹ε`. In the scalar case
//! its fixed point satisfies `Σ³ = ε²`. It is the exact gradient flow of
//! `εᵀΣ⁻¹ε + ½ tr(Σ²)`; the data term matches `εᵀΣ⁻¹ε` and the decay term
//! coincides with the log-determinant gradient only at `Σ = I`.

use serde::{Deserialize, Serialize};

use crate::error::{PcError, Result};
use crate::linalg::{check_spd, floor_eigenvalues, max_abs_diff, symmetrize, Matrix, Precision, Vector};
use crate::model::{NetworkParams, NetworkSpec};
use crate::numdiff;

/// Smallest eigenvalue a learned covariance may take.
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Above this dimension a `full_learned` layer is updated diagonally.
pub const FULL_PRECISION_MAX_DIM: usize = 64;
/// Minimum sample count for [`empirical_fixed_point_check`].
pub const MIN_FIXED_POINT_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    #[default]
    Fixed,
    DiagonalLearned,
    FullLearned,
}

fn weighted_errors(cov: &Matrix, errors: &[Vector]) -> Result<Vec<Vector>> {
    let chol = cov.clone().cholesky().ok_or_else(|| PcError::Domain("covariance is not positive definite".into()))?;
    errors
        .iter()
        .map(|e| {
            if e.len() != cov.nrows() {
                return Err(PcError::Shape(format!("error of length {} vs {}-dim covariance", e.len(), cov.nrows())));
            }
            Ok(chol.solve(e))
        })
        .collect()
}

/// `mean(ε̃ε̃ᵀ) − Σ`, the right-hand side of the covariance ODE.
pub fn precision_direction(cov: &Matrix, errors: &[Vector]) -> Result<Matrix> {
    check_spd("covariance", cov)?;
    if errors.is_empty() {
        return Err(PcError::Argument("no error samples".into()));
    }
    let n = cov.nrows();
    let mut second = Matrix::zeros(n, n);
    for t in weighted_errors(cov, errors)? {
        second += &t * t.transpose();
    }
    Ok(second / errors.len() as f64 - cov)
}

/// One Euler step `Σ ← Σ + η(ε̃ε̃ᵀ − Σ)`, symmetrised and eigenvalue-floored.
pub fn precision_step(cov: &Matrix, eps: &Vector, lr: f64) -> Result<Matrix> {
    precision_step_batch(cov, std::slice::from_ref(eps), lr)
}

/// Batch version using the mean `ε̃ε̃ᵀ` over `errors`.
pub fn precision_step_batch(cov: &Matrix, errors: &[Vector], lr: f64) -> Result<Matrix> {
    let dir = precision_direction(cov, errors)?;
    Ok(floor_eigenvalues(&symmetrize(&(cov + dir * lr)), EIGEN_FLOOR))
}

/// Independent scalar ODE per coordinate of a diagonal covariance.
pub fn precision_step_diagonal(variances: &Vector, errors: &[Vector], lr: f64) -> Result<Vector> {
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
        return Err(PcError::Domain(format!("variance {v} is not positive")));
    }
    if errors.is_empty() {
        return Err(PcError::Argument("no error samples".into()));
    }
    let n = errors.len() as f64;
    let mut out = variances.clone();
    for (i, s) in out.iter_mut().enumerate() {
        let mut m2 = 0.0;
        for e in errors {
            if e.len() != variances.len() {
                return Err(PcError::Shape("error/variance length mismatch".into()));
            }
            let t = e[i] / *s;
            m2 += t * t;
        }
        *s = (*s + lr * (m2 / n - *s)).max(EIGEN_FLOOR);
    }
    Ok(out)
}

/// Applies one precision-learning step in the requested mode.
pub fn learn_precision(current: &Precision, errors: &[Vector], lr: f64, mode: PrecisionMode) -> Result<Precision> {
    let diagonal = |p: &Precision| {
        let var = p.covariance().diagonal();
        Precision::diagonal(precision_step_diagonal(&var, errors, lr)?.map(|v| 1.0 / v))
    };
    match mode {
        PrecisionMode::Fixed => Ok(current.clone()),
        PrecisionMode::DiagonalLearned => diagonal(current),
        PrecisionMode::FullLearned if current.dim() > FULL_PRECISION_MAX_DIM => diagonal(current),
        PrecisionMode::FullLearned => Precision::from_covariance(&precision_step_batch(&current.covariance(), errors, lr)?),
    }
}

/// `‖mean(ε̃ε̃ᵀ) − Σ‖_F` over a stream of error samples.
pub fn empirical_fixed_point_check(samples: &[Vector], cov: &Matrix) -> Result<f64> {
    if samples.len() < MIN_FIXED_POINT_SAMPLES {
        return Err(PcError::Argument(format!(
            "need at least {MIN_FIXED_POINT_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    Ok(precision_direction(cov, samples)?.norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherMuCheck {
    /// Finite-difference Hessian of the layer energy with respect to `μ_l`.
    pub numeric_hessian: Matrix,
    /// Hessian with the factor 2 of the un-halved energy removed.
    pub aligned: Matrix,
    pub precision: Matrix,
    pub deviation: f64,
}

fn layer_energy_parts(params: &NetworkParams, spec: &NetworkSpec, layer: usize) -> Result<()> {
    params.check(spec)?;
    if layer > spec.depth() {
        return Err(PcError::Argument(format!("layer {layer} out of range 0..={}", spec.depth())));
    }
    if layer < spec.depth() && !spec.activation(layer + 1).is_linear() {
        return Err(PcError::Unsupported("Fisher checks require an identity activation".into()));
    }
    Ok(())
}

/// Compares the curvature of `(μ_l − θ μ_{l+1})ᵀ Σ_l⁻¹ (μ_l − θ μ_{l+1})`
/// in `μ_l` against `Σ_l⁻¹`.
pub fn fisher_check_mu(params: &NetworkParams, spec: &NetworkSpec, layer: usize) -> Result<FisherMuCheck> {
    layer_energy_parts(params, spec, layer)?;
    let precision = &params.precision[layer];
    let centre = if layer < spec.depth() {
        params.theta(layer + 1) * Vector::from_element(spec.dim(layer + 1), 1.0)
    } else {
        spec.prior_mean.clone()
    };
    let energy = |mu: &Vector| precision.quad_form(&(mu - &centre));
    let numeric_hessian = numdiff::hessian(energy, &centre, 1e-2);
    let aligned = &numeric_hessian * 0.5;
    let p = precision.to_matrix();
    let deviation = max_abs_diff(&aligned, &p);
    Ok(FisherMuCheck { numeric_hessian, aligned, precision: p, deviation })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherThetaCheck {
    /// Monte-Carlo expected Hessian in `vec(θ)` (column-major), halved.
    pub aligned: Matrix,
    /// `V[μ_{l+1}] ⊗ Σ_l⁻¹`.
    pub predicted: Matrix,
    /// `E[μ_{l+1} μ_{l+1}ᵀ] ⊗ Σ_l⁻¹`, which also carries the mean term.
    pub predicted_second_moment: Matrix,
    /// max-abs gap between `aligned` and `predicted`.
    pub deviation: f64,
    pub activity_variance: Matrix,
}

/// Expected curvature of the layer-`l` energy in `θ_{l+1}` over samples of
/// `μ_{l+1}`, compared against `Σ_l⁻¹ ⊗ V[μ_{l+1}]`.
///
/// With non-zero-mean activities the expected Hessian equals the second
/// moment, so `deviation` picks up `mmᵀ ⊗ Σ⁻¹`; `predicted_second_moment`
/// reports the exact form.
pub fn fisher_check_theta(
    params: &NetworkParams,
    spec: &NetworkSpec,
    layer: usize,
    activity_samples: &[Vector],
) -> Result<FisherThetaCheck> {
    layer_energy_parts(params, spec, layer)?;
    if layer == spec.depth() {
        return Err(PcError::Argument("the top layer has no weights above it".into()));
    }
    if activity_samples.is_empty() {
        return Err(PcError::Argument("no activity samples".into()));
    }
    let rows = spec.dim(layer);
    let cols = spec.dim(layer + 1);
    if let Some(bad) = activity_samples.iter().find(|x| x.len() != cols) {
        return Err(PcError::Shape(format!("activity sample of length {}, expected {cols}", bad.len())));
    }
    let precision = &params.precision[layer];
    let n = activity_samples.len() as f64;

    // The energy at θ + Δ, with μ_l placed at the prediction of θ, is
    // (Δ x)ᵀ Σ⁻¹ (Δ x); averaging over samples gives the expected Hessian.
    let mean_energy = |delta: &Vector| {
        let d = Matrix::from_column_slice(rows, cols, delta.as_slice());
        activity_samples.iter().map(|x| precision.quad_form(&(&d * x))).sum::<f64>() / n
    };
    let hess = numdiff::hessian(mean_energy, &Vector::zeros(rows * cols), 1e-2);
    let aligned = hess * 0.5;

    let mean = activity_samples.iter().fold(Vector::zeros(cols), |a, x| a + x) / n;
    let second = activity_samples.iter().fold(Matrix::zeros(cols, cols), |a, x| a + x * x.transpose()) / n;
    let variance = &second - &mean * mean.transpose();
    let p = precision.to_matrix();
    let predicted = variance.kronecker(&p);
    let predicted_second_moment = second.kronecker(&p);
    let deviation = max_abs_diff(&aligned, &predicted);
    Ok(FisherThetaCheck { aligned, predicted, predicted_second_moment, deviation, activity_variance: variance })
}

/// Natural-gradient step `G⁻¹ g` for a symmetric positive-definite Fisher `G`.
pub fn natural_gradient(fisher: &Matrix, grad: &Vector) -> Result<Vector> {
    let chol = fisher.clone().cholesky().ok_or_else(|| PcError::Domain("Fisher matrix is not positive definite".into()))?;
    Ok(chol.solve(grad))
}
