//! Small dense linear-algebra helpers and the [`Precision`] type.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PcError, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Symmetry tolerance for covariance and precision matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Checks symmetry and strict positive-definiteness (via Cholesky).
pub fn check_spd(name: &str, m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(PcError::Shape(format!("{name} is {}x{}, expected square", m.nrows(), m.ncols())));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(PcError::Domain(format!("{name} has non-finite entries")));
    }
    if !is_symmetric(m, SYMMETRY_TOL) {
        return Err(PcError::Domain(format!("{name} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(PcError::Domain(format!("{name} is not positive definite")));
    }
    Ok(())
}

/// Checks symmetry and positive semi-definiteness (eigenvalues ≥ -tol).
pub fn check_spsd(name: &str, m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(PcError::Shape(format!("{name} is {}x{}, expected square", m.nrows(), m.ncols())));
    }
    if !is_symmetric(m, SYMMETRY_TOL) {
        return Err(PcError::Domain(format!("{name} is not symmetric")));
    }
    if m.nrows() > 0 && m.clone().symmetric_eigenvalues().min() < -SYMMETRY_TOL {
        return Err(PcError::Domain(format!("{name} is not positive semi-definite")));
    }
    Ok(())
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes `m` and raises every eigenvalue to at least `floor`.
pub fn floor_eigenvalues(m: &Matrix, floor: f64) -> Matrix {
    let eig = symmetrize(m).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    symmetrize(&(q * Matrix::from_diagonal(&vals) * q.transpose()))
}

pub fn spd_inverse(name: &str, m: &Matrix) -> Result<Matrix> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| PcError::Domain(format!("{name} is not positive definite")))
}

pub fn spd_log_det(name: &str, m: &Matrix) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| PcError::Domain(format!("{name} is not positive definite")))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    max_abs(a.iter().zip(b.iter()).map(|(x, y)| x - y))
}

pub fn max_abs_diff_vec(a: &Vector, b: &Vector) -> f64 {
    assert_eq!(a.len(), b.len());
    max_abs(a.iter().zip(b.iter()).map(|(x, y)| x - y))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(m: &Matrix) -> f64 {
    m.clone().symmetric_eigenvalues().max()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
enum PrecisionRepr {
    Full(Matrix),
    Diagonal(Vector),
}

/// An inverse covariance Σ⁻¹, either dense or diagonal.
///
/// Always symmetric positive-definite; the constructors reject anything else.
/// The log-determinant is cached since free-energy evaluation needs it on
/// every call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrecisionRepr", into = "PrecisionRepr")]
pub struct Precision {
    repr: PrecisionRepr,
    log_det: f64,
}

impl TryFrom<PrecisionRepr> for Precision {
    type Error = PcError;
    fn try_from(r: PrecisionRepr) -> Result<Self> {
        match r {
            PrecisionRepr::Full(m) => Precision::full(m),
            PrecisionRepr::Diagonal(d) => Precision::diagonal(d),
        }
    }
}

impl From<Precision> for PrecisionRepr {
    fn from(p: Precision) -> Self {
        p.repr
    }
}

impl Precision {
    pub fn identity(dim: usize) -> Self {
        Precision { repr: PrecisionRepr::Diagonal(Vector::from_element(dim, 1.0)), log_det: 0.0 }
    }

    pub fn scalar(dim: usize, value: f64) -> Result<Self> {
        Self::diagonal(Vector::from_element(dim, value))
    }

    pub fn full(m: Matrix) -> Result<Self> {
        check_spd("precision", &m)?;
        let log_det = spd_log_det("precision", &m)?;
        Ok(Precision { repr: PrecisionRepr::Full(m), log_det })
    }

    pub fn diagonal(d: Vector) -> Result<Self> {
        if let Some(bad) = d.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(PcError::Domain(format!("diagonal precision entry {bad} is not positive")));
        }
        let log_det = d.iter().map(|v| v.ln()).sum();
        Ok(Precision { repr: PrecisionRepr::Diagonal(d), log_det })
    }

    /// Builds Σ⁻¹ from a covariance Σ.
    pub fn from_covariance(cov: &Matrix) -> Result<Self> {
        check_spd("covariance", cov)?;
        Self::full(symmetrize(&spd_inverse("covariance", cov)?))
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            PrecisionRepr::Full(m) => m.nrows(),
            PrecisionRepr::Diagonal(d) => d.len(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.repr, PrecisionRepr::Diagonal(_))
    }

    /// Σ⁻¹ v
    pub fn apply(&self, v: &Vector) -> Vector {
        match &self.repr {
            PrecisionRepr::Full(m) => m * v,
            PrecisionRepr::Diagonal(d) => d.component_mul(v),
        }
    }

    /// vᵀ Σ⁻¹ v
    pub fn quad_form(&self, v: &Vector) -> f64 {
        match &self.repr {
            PrecisionRepr::Full(m) => v.dot(&(m * v)),
            PrecisionRepr::Diagonal(d) => v.iter().zip(d.iter()).map(|(x, p)| p * x * x).sum(),
        }
    }

    /// ln det Σ⁻¹
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// ln det(2π Σ) = d ln 2π − ln det Σ⁻¹
    pub fn log_det_2pi_cov(&self) -> f64 {
        self.dim() as f64 * (2.0 * std::f64::consts::PI).ln() - self.log_det
    }

    pub fn to_matrix(&self) -> Matrix {
        match &self.repr {
            PrecisionRepr::Full(m) => m.clone(),
            PrecisionRepr::Diagonal(d) => Matrix::from_diagonal(d),
        }
    }

    pub fn covariance(&self) -> Matrix {
        match &self.repr {
            PrecisionRepr::Full(m) => symmetrize(&spd_inverse("precision", m).expect("validated at construction")),
            PrecisionRepr::Diagonal(d) => Matrix::from_diagonal(&d.map(|v| 1.0 / v)),
        }
    }
}
