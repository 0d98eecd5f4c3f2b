//! Central finite differences.

use crate::linalg::{Matrix, Vector};

/// Central-difference Hessian of `f` at `x` with step `h`.
///
/// Exact up to rounding for quadratics.
pub fn hessian(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Matrix {
    let n = x.len();
    let mut out = Matrix::zeros(n, n);
    let eval = |di: (usize, f64), dj: (usize, f64)| {
        let mut y = x.clone();
        y[di.0] += di.1;
        y[dj.0] += dj.1;
        f(&y)
    };
    for i in 0..n {
        for j in i..n {
            let v = (eval((i, h), (j, h)) - eval((i, h), (j, -h)) - eval((i, -h), (j, h)) + eval((i, -h), (j, -h)))
                / (4.0 * h * h);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Central-difference gradient of `f` at `x`.
pub fn gradient(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Vector {
    let mut g = Vector::zeros(x.len());
    for i in 0..x.len() {
        let mut p = x.clone();
        p[i] += h;
        let mut m = x.clone();
        m[i] -= h;
        g[i] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}
