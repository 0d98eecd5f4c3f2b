//! Shared oracles: an independent free-energy implementation and central
//! finite differences over it.
#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use predcode::dynamics::{action_step_with_cost, ActionConfig};
use predcode::model::{compute_errors, mu_update_direction, weight_gradients, NetworkParams, NetworkSpec, NetworkState};
use predcode::precision::precision_direction;
use predcode::relaxed::{relaxed_deltas, relaxed_errors, relaxed_infer_step, RelaxationFlags, RelaxedNetwork};
use predcode::{Activation, Precision};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type M = DMatrix<f64>;
pub type V = DVector<f64>;

pub const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const INSTANCES: usize = 50;

pub fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> V {
    V::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

pub fn normal_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> M {
    M::from_fn(r, c, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

pub fn spd(n: usize, rng: &mut ChaCha8Rng) -> M {
    let a = normal_mat(n, n, rng);
    &a * a.transpose() / n as f64 + M::identity(n, n) * 0.5
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Identity => x,
        Activation::Tanh => x.tanh(),
        Activation::Logistic => 1.0 / (1.0 + (-x).exp()),
        Activation::Rectifier => x.max(0.0),
    }
}

/// Plain-matrix description of a network, independent of the crate types.
#[derive(Clone, Debug)]
pub struct Net {
    pub mu: Vec<V>,
    pub theta: Vec<M>,
    /// Precision matrices `Σ_l⁻¹`.
    pub pi: Vec<M>,
    pub acts: Vec<Activation>,
    pub prior: V,
    pub zeta: Option<Vec<M>>,
}

impl Net {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let depth = rng.random_range(1..=3);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=5)).collect();
        let choices = [Activation::Identity, Activation::Tanh, Activation::Logistic];
        Net {
            mu: dims.iter().map(|&d| normal_vec(d, rng)).collect(),
            theta: (1..=depth).map(|l| normal_mat(dims[l - 1], dims[l], rng) * 0.7).collect(),
            pi: dims.iter().map(|&d| spd(d, rng)).collect(),
            acts: (0..depth).map(|_| choices[rng.random_range(0..3)]).collect(),
            prior: normal_vec(dims[depth], rng),
            zeta: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.theta.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.mu.iter().map(|m| m.len()).collect()
    }

    /// `Σ_l [ε_lᵀ Π_l ε_l − ln det Π_l + d_l ln 2π]`.
    pub fn energy(&self) -> f64 {
        let l_top = self.depth();
        let mut f = 0.0;
        for l in 0..=l_top {
            let eps = if l == l_top {
                &self.mu[l] - &self.prior
            } else {
                let pre = &self.theta[l] * &self.mu[l + 1];
                let mut pred = pre.map(|x| act(self.acts[l], x));
                if let Some(z) = &self.zeta {
                    pred = &z[l] * pred;
                }
                &self.mu[l] - pred
            };
            let pi = &self.pi[l];
            let logdet = pi.clone().lu().determinant().ln();
            f += (eps.transpose() * pi * &eps)[(0, 0)] - logdet + self.mu[l].len() as f64 * (2.0 * std::f64::consts::PI).ln();
        }
        f
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.dims(), Activation::Identity)
            .unwrap()
            .with_activations(self.acts.clone())
            .unwrap()
            .with_prior_mean(self.prior.clone())
            .unwrap()
    }

    pub fn params(&self) -> NetworkParams {
        NetworkParams { theta: self.theta.clone(), precision: self.pi.iter().map(|p| Precision::full(p.clone()).unwrap()).collect() }
    }

    pub fn state(&self) -> NetworkState {
        let spec = self.spec();
        let mut s = NetworkState::zeros(&spec);
        s.mu = self.mu.clone();
        s
    }
}

/// Central difference of `f` in every entry of a matrix.
pub fn fd_matrix(m: &M, mut f: impl FnMut(&M) -> f64) -> M {
    let mut g = M::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let mut p = m.clone();
            p[(i, j)] += FD_STEP;
            let up = f(&p);
            p[(i, j)] -= 2.0 * FD_STEP;
            g[(i, j)] = (up - f(&p)) / (2.0 * FD_STEP);
        }
    }
    g
}

pub fn fd_vector(v: &V, mut f: impl FnMut(&V) -> f64) -> V {
    let m = M::from_column_slice(v.len(), 1, v.as_slice());
    let g = fd_matrix(&m, |mm| f(&mm.column(0).into_owned()));
    g.column(0).into_owned()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, 1e-3)`.
pub fn rel_err(a: &M, b: &M) -> f64 {
    let scale = a.amax().max(b.amax()).max(1e-3);
    (a - b).amax() / scale
}

fn col(v: &V) -> M {
    M::from_column_slice(v.len(), 1, v.as_slice())
}

/// Value-unit updates against `−½ ∂F/∂μ_l`, every layer.
pub fn mu_case(rng: &mut ChaCha8Rng) -> f64 {
    let net = Net::random(rng);
    let (spec, params) = (net.spec(), net.params());
    let mut state = net.state();
    compute_errors(&mut state, &params, &spec).unwrap();
    let dirs = mu_update_direction(&state, &params, &spec).unwrap();
    (0..=net.depth())
        .map(|l| {
            let fd = fd_vector(&net.mu[l], |x| {
                let mut n = net.clone();
                n.mu[l] = x.clone();
                n.energy()
            });
            rel_err(&col(&dirs[l]), &col(&(fd * -0.5)))
        })
        .fold(0.0, f64::max)
}

/// Weight updates against `−½ ∂F/∂θ_l`.
pub fn theta_case(rng: &mut ChaCha8Rng) -> f64 {
    let net = Net::random(rng);
    let (spec, params) = (net.spec(), net.params());
    let mut state = net.state();
    compute_errors(&mut state, &params, &spec).unwrap();
    let grads = weight_gradients(&state, &params, &spec).unwrap();
    (0..net.depth())
        .map(|k| {
            let fd = fd_matrix(&net.theta[k], |t| {
                let mut n = net.clone();
                n.theta[k] = t.clone();
                n.energy()
            });
            rel_err(&grads[k], &(fd * -0.5))
        })
        .fold(0.0, f64::max)
}

/// `G(Σ) = mean_i εᵢᵀ Σ⁻¹ εᵢ + ½ tr(Σ²)`, the objective whose negative
/// gradient is the covariance update.
pub fn covariance_objective(cov: &M, errors: &[V]) -> f64 {
    let inv = cov.clone().lu().try_inverse().unwrap();
    let data: f64 = errors.iter().map(|e| (e.transpose() * &inv * e)[(0, 0)]).sum::<f64>() / errors.len() as f64;
    data + 0.5 * (cov * cov).trace()
}

/// Covariance updates against `−∂G/∂Σ`; at `Σ = I` also against `−∂F/∂Σ` of
/// the full energy including the log-determinant.
pub fn sigma_case(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=4);
    let cov = spd(n, rng);
    let errors: Vec<V> = (0..rng.random_range(1..=5)).map(|_| normal_vec(n, rng)).collect();
    let dir = precision_direction(&cov, &errors).unwrap();
    let fd = fd_matrix(&cov, |c| covariance_objective(c, &errors));
    let general = rel_err(&dir, &(-fd));

    let eye = M::identity(n, n);
    let at_identity = precision_direction(&eye, &errors).unwrap();
    let full = |c: &M| {
        let inv = c.clone().lu().try_inverse().unwrap();
        errors.iter().map(|e| (e.transpose() * &inv * e)[(0, 0)]).sum::<f64>() / errors.len() as f64 + c.clone().lu().determinant().ln()
    };
    let fd_full = fd_matrix(&eye, full);
    general.max(rel_err(&at_identity, &(-fd_full)))
}

fn relaxed_setup(rng: &mut ChaCha8Rng, flags: RelaxationFlags) -> (Net, RelaxedNetwork) {
    let mut net = Net::random(rng);
    let spec = net.spec();
    let mut relaxed = RelaxedNetwork::new(&spec, flags, rng);
    if let Some(z) = relaxed.zeta.as_mut() {
        for m in z.iter_mut() {
            *m += normal_mat(m.nrows(), m.ncols(), rng) * 0.3;
        }
        net.zeta = Some(z.clone());
    }
    (net, relaxed)
}

/// With `ψ` on, `Δψ_l` is the transpose of `−½ ∂F/∂θ_l`.
pub fn psi_case(rng: &mut ChaCha8Rng) -> f64 {
    let (net, relaxed) = relaxed_setup(rng, RelaxationFlags { use_psi: true, ..Default::default() });
    let (spec, params) = (net.spec(), net.params());
    let mut state = net.state();
    relaxed_errors(&mut state, &params, &spec, &relaxed).unwrap();
    let deltas = relaxed_deltas(&state, &params, &spec, &relaxed).unwrap();
    let psi = deltas.psi.unwrap();
    (0..net.depth())
        .map(|k| {
            let fd = fd_matrix(&net.theta[k], |t| {
                let mut n = net.clone();
                n.theta[k] = t.clone();
                n.energy()
            });
            rel_err(&psi[k], &(fd * -0.5).transpose())
        })
        .fold(0.0, f64::max)
}

/// With `ζ` on, the `ζ`, `θ` and value updates against `−½ ∇F` of the `ζ`-modified energy.
pub fn zeta_case(rng: &mut ChaCha8Rng) -> f64 {
    let (net, relaxed) = relaxed_setup(rng, RelaxationFlags { use_zeta: true, ..Default::default() });
    let (spec, params) = (net.spec(), net.params());
    let mut state = net.state();
    relaxed_errors(&mut state, &params, &spec, &relaxed).unwrap();
    let deltas = relaxed_deltas(&state, &params, &spec, &relaxed).unwrap();
    let zeta = deltas.zeta.unwrap();
    let mut worst = 0.0f64;
    for l in 0..net.depth() {
        let fd = fd_matrix(&net.zeta.as_ref().unwrap()[l], |z| {
            let mut n = net.clone();
            n.zeta.as_mut().unwrap()[l] = z.clone();
            n.energy()
        });
        worst = worst.max(rel_err(&zeta[l], &(fd * -0.5)));
        let fd = fd_matrix(&net.theta[l], |t| {
            let mut n = net.clone();
            n.theta[l] = t.clone();
            n.energy()
        });
        worst = worst.max(rel_err(&deltas.theta[l], &(fd * -0.5)));
    }
    let eta = spec.step_size;
    let mut stepped = state.clone();
    relaxed_infer_step(&mut stepped, &params, &spec, &relaxed).unwrap();
    for l in 0..=net.depth() {
        let dir = (&stepped.mu[l] - &state.mu[l]) / eta;
        let fd = fd_vector(&net.mu[l], |x| {
            let mut n = net.clone();
            n.mu[l] = x.clone();
            n.energy()
        });
        worst = worst.max(rel_err(&col(&dir), &col(&(fd * -0.5))));
    }
    worst
}

/// Action updates against `−½ ∂F/∂a` for a linear plant `o(a) = o₀ + G a`.
pub fn action_case(rng: &mut ChaCha8Rng) -> f64 {
    let p = rng.random_range(1..=4);
    let m = rng.random_range(1..=3);
    let g = normal_mat(p, m, rng);
    let o0 = normal_vec(p, rng);
    let setpoint = normal_vec(p, rng);
    let a = normal_vec(m, rng);
    let pi_o = spd(p, rng);
    let pi_a = spd(m, rng);
    let prior = normal_vec(m, rng);
    let mut cfg = ActionConfig::new(g.clone(), 0.1);
    cfg.action_prior = prior.clone();
    cfg.action_precision = Some(Precision::full(pi_a.clone()).unwrap());
    let o = &o0 + &g * &a;
    let step = action_step_with_cost(&o, &setpoint, &a, &cfg, &Precision::full(pi_o.clone()).unwrap()).unwrap();
    let energy = |x: &V| {
        let e = &o0 + &g * x - &setpoint;
        let d = x - &prior;
        (e.transpose() * &pi_o * &e)[(0, 0)] + (d.transpose() * &pi_a * &d)[(0, 0)]
    };
    let fd = fd_vector(&a, energy);
    rel_err(&col(&step), &col(&(fd * -0.5)))
}

pub type Suite = (&'static str, fn(&mut ChaCha8Rng) -> f64);

pub const GRADIENT_SUITES: [Suite; 6] = [
    ("mu", mu_case),
    ("theta", theta_case),
    ("sigma", sigma_case),
    ("psi", psi_case),
    ("zeta", zeta_case),
    ("action", action_case),
];

/// Worst relative error of a suite over `INSTANCES` seeded instances.
pub fn run_suite(seed: u64, case: fn(&mut ChaCha8Rng) -> f64) -> f64 {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..INSTANCES).map(|_| case(&mut rng)).fold(0.0, f64::max)
}
