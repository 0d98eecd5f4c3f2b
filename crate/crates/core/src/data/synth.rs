use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_len, PcError, Result};
use crate::linalg::{check_spsd, symmetrize, Matrix, Vector};
use crate::model::{predict, NetworkParams, NetworkSpec};

/// `L` with `L Lᵀ = Σ` for a symmetric positive semi-definite `Σ`.
pub fn gaussian_factor(cov: &Matrix) -> Result<Matrix> {
    check_spsd("covariance", cov)?;
    let eig = symmetrize(cov).symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&roots))
}

fn normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// `n` draws from `N(mean, cov)`; deterministic in `seed`.
pub fn synth_gaussian(seed: u64, n: usize, mean: &Vector, cov: &Matrix) -> Result<Vec<Vector>> {
    ensure_len("covariance", cov.nrows(), mean.len())?;
    let l = gaussian_factor(cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| mean + &l * normal(mean.len(), &mut rng)).collect())
}

/// Ancestral samples of the hierarchical Gaussian model: `μ_L ~ N(μ̄, Σ_L)`,
/// then `μ_{l-1} ~ N(f_l(θ_l μ_l), Σ_{l-1})`. Returns the observations `μ₀`.
pub fn synth_linear_gaussian(seed: u64, n: usize, spec: &NetworkSpec, params: &NetworkParams) -> Result<Vec<Vector>> {
    spec.validate()?;
    params.check(spec)?;
    let factors = params.precision.iter().map(|p| gaussian_factor(&p.covariance())).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = spec.depth();
    Ok((0..n)
        .map(|_| {
            let mut v = &spec.prior_mean + &factors[depth] * normal(spec.dim(depth), &mut rng);
            for l in (1..=depth).rev() {
                v = predict(params, spec, l, &v) + &factors[l - 1] * normal(spec.dim(l - 1), &mut rng);
            }
            v
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSamples {
    pub inputs: Vec<Vector>,
    pub classes: Vec<usize>,
}

/// Isotropic Gaussian clusters around random unit-norm centres scaled by `separation`.
pub fn synth_clusters(seed: u64, n: usize, classes: usize, dim: usize, separation: f64, noise: f64) -> Result<LabeledSamples> {
    if classes == 0 || dim == 0 {
        return Err(PcError::Argument("clusters need at least one class and dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vector> = (0..classes)
        .map(|_| {
            let c = normal(dim, &mut rng);
            c.normalize() * separation
        })
        .collect();
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        inputs.push(&centres[k] + normal(dim, &mut rng) * noise);
        labels.push(k);
    }
    Ok(LabeledSamples { inputs, classes: labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_degenerate() {
        let m = Vector::from_vec(vec![1.0, -2.0]);
        let c = Matrix::identity(2, 2);
        assert_eq!(synth_gaussian(7, 20, &m, &c).unwrap(), synth_gaussian(7, 20, &m, &c).unwrap());
        let z = synth_gaussian(7, 5, &m, &Matrix::zeros(2, 2)).unwrap();
        assert!(z.iter().all(|x| *x == m));
    }
}
