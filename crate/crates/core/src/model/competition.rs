use crate::error::{ensure_len, Result};
use crate::linalg::{Matrix, Vector};

/// Biased-competition update `α μ + β θ₁ᵀ(o − θ₁ μ) + γ θ₂ μ̄`.
///
/// With `α = 1 − η` and `β = γ = η` this is one Euler step of the
/// single-layer linear model with identity precisions and prior mean `θ₂ μ̄`.
#[allow(clippy::too_many_arguments)]
pub fn biased_competition_step(
    mu: &Vector,
    mu_bar: &Vector,
    o: &Vector,
    theta1: &Matrix,
    theta2: &Matrix,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<Vector> {
    ensure_len("theta1 rows", theta1.nrows(), o.len())?;
    ensure_len("theta1 cols", theta1.ncols(), mu.len())?;
    ensure_len("theta2 rows", theta2.nrows(), mu.len())?;
    ensure_len("theta2 cols", theta2.ncols(), mu_bar.len())?;
    let eps_o = o - theta1 * mu;
    Ok(mu * alpha + theta1.tr_mul(&eps_o) * beta + (theta2 * mu_bar) * gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_example() {
        let s = |v: f64| Vector::from_element(1, v);
        let m = |v: f64| Matrix::from_element(1, 1, v);
        let out = biased_competition_step(&s(2.0), &s(0.0), &s(3.0), &m(0.5), &m(1.0), 0.9, 0.1, 0.1).unwrap();
        assert!((out[0] - 1.9).abs() < 1e-15);
        let same = biased_competition_step(&s(2.0), &s(4.0), &s(3.0), &m(0.5), &m(1.0), 1.0, 0.0, 0.0).unwrap();
        assert_eq!(same[0], 2.0);
    }
}
