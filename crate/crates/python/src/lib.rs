//! Python bindings: networks, Kalman steps, PID and graph comparisons, experiment runs.

use predcode::data::load_idx;
use predcode::dynamics::{simulate_pc_pid, simulate_pid_velocity, PcPidController};
use predcode::experiment::{backprop_gap as graph_gap, comparison_graph, run_experiment as run, ExperimentConfig};
use predcode::graph::{RelaxConfig, Schedule};
use predcode::kalman::{kf_step as kalman_step, pc_linear_solve, BeliefState, LinearStateSpace, PcSolveConfig};
use predcode::model::{free_energy, run_inference, LearningConfig, NetworkParams, NetworkSpec, NetworkState};
use predcode::precision::precision_step as cov_step;
use predcode::relaxed::{RelaxationFlags, RelaxedNetwork};
use predcode::training::{accuracy_relaxed, classify_relaxed, train_epoch_relaxed, ClampMode, LabeledBatch, TrainConfig};
use predcode::{Activation, Matrix, PcError, Vector};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn py_err(e: PcError) -> PyErr {
    match e {
        PcError::Divergence { .. } | PcError::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        PcError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn vector(v: Vec<f64>) -> Vector {
    Vector::from_vec(v)
}

fn matrix(rows: Rows) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(Matrix::from_row_iterator(r, c, rows.into_iter().flatten()))
}

fn rows(m: &Matrix) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn activation(name: &str) -> PyResult<Activation> {
    name.parse().map_err(PyValueError::new_err)
}

fn clamp_mode(name: &str) -> PyResult<ClampMode> {
    match name {
        "unsupervised" => Ok(ClampMode::Unsupervised),
        "supervised_forward" => Ok(ClampMode::SupervisedForward),
        "supervised_backward" => Ok(ClampMode::SupervisedBackward),
        _ => Err(PyValueError::new_err(format!("unknown clamp mode {name:?}"))),
    }
}

/// Hierarchical predictive coding network; layer 0 is the observation layer.
#[pyclass(module = "predcode")]
struct Network {
    spec: NetworkSpec,
    params: NetworkParams,
    relaxed: RelaxedNetwork,
    mode: ClampMode,
    rng: ChaCha8Rng,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (layer_dims, activations, seed=0, step_size=0.1, max_iters=500, use_psi=false, drop_derivative=false, use_zeta=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        layer_dims: Vec<usize>,
        activations: Vec<String>,
        seed: u64,
        step_size: f64,
        max_iters: usize,
        use_psi: bool,
        drop_derivative: bool,
        use_zeta: bool,
    ) -> PyResult<Self> {
        let acts = activations.iter().map(|a| activation(a)).collect::<PyResult<Vec<_>>>()?;
        let spec = NetworkSpec::new(layer_dims, Activation::Identity)
            .and_then(|s| s.with_activations(acts))
            .and_then(|s| s.with_step_size(step_size))
            .and_then(|s| s.with_max_iters(max_iters))
            .map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = NetworkParams::random(&spec, &mut rng);
        let relaxed = RelaxedNetwork::new(&spec, RelaxationFlags { use_psi, drop_derivative, use_zeta }, &mut rng);
        Ok(Network { spec, params, relaxed, mode: ClampMode::Unsupervised, rng })
    }

    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.spec.layer_dims.clone()
    }

    /// `θ_l` for `l = 1..=L`, as rows.
    fn theta(&self, l: usize) -> PyResult<Rows> {
        if l == 0 || l > self.spec.depth() {
            return Err(PyValueError::new_err(format!("layer {l} out of range 1..={}", self.spec.depth())));
        }
        Ok(rows(self.params.theta(l)))
    }

    fn set_theta(&mut self, l: usize, value: Rows) -> PyResult<()> {
        if l == 0 || l > self.spec.depth() {
            return Err(PyValueError::new_err(format!("layer {l} out of range 1..={}", self.spec.depth())));
        }
        self.params.set_theta(l, matrix(value)?).map_err(py_err)
    }

    /// Clamps layer 0 to `observation` and relaxes the rest; returns the values and F.
    fn infer<'py>(&self, py: Python<'py>, observation: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let mut state = NetworkState::zeros(&self.spec);
        state.clamp(0, vector(observation)).map_err(py_err)?;
        let report = run_inference(&mut state, &self.params, &self.spec).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("mu", state.mu.iter().map(|m| m.as_slice().to_vec()).collect::<Vec<_>>())?;
        out.set_item("eps", state.eps.iter().map(|m| m.as_slice().to_vec()).collect::<Vec<_>>())?;
        out.set_item("free_energy", report.final_free_energy)?;
        out.set_item("iterations", report.iterations)?;
        out.set_item("converged", report.converged)?;
        Ok(out)
    }

    /// F at the given per-layer values.
    fn free_energy(&self, mu: Vec<Vec<f64>>) -> PyResult<f64> {
        let mut state = NetworkState::zeros(&self.spec);
        if mu.len() != state.mu.len() {
            return Err(PyValueError::new_err(format!("expected {} layers", state.mu.len())));
        }
        state.mu = mu.into_iter().map(vector).collect();
        predcode::model::compute_errors(&mut state, &self.params, &self.spec).map_err(py_err)?;
        free_energy(&state, &self.params, &self.spec).map_err(py_err)
    }

    /// EM training; returns the mean F per epoch.
    #[pyo3(signature = (inputs, labels=None, epochs=1, mode="supervised_backward", lr=0.05, batch_size=32, num_classes=None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        inputs: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
        epochs: usize,
        mode: &str,
        lr: f64,
        batch_size: usize,
        num_classes: Option<usize>,
    ) -> PyResult<Vec<f64>> {
        let mode = clamp_mode(mode)?;
        let batch = self.batch(inputs, labels, mode, num_classes)?;
        let cfg = TrainConfig { mode, batch_size, learning: LearningConfig { weight_lr: lr, ..Default::default() } };
        self.mode = mode;
        (0..epochs)
            .map(|_| {
                train_epoch_relaxed(&batch, &mut self.params, &mut self.relaxed, &self.spec, &cfg, &mut self.rng)
                    .map(|r| r.mean_free_energy)
                    .map_err(py_err)
            })
            .collect()
    }

    fn classify(&self, input: Vec<f64>) -> PyResult<usize> {
        classify_relaxed(&vector(input), &self.params, &self.relaxed, &self.spec, self.mode).map(|c| c.label).map_err(py_err)
    }

    #[pyo3(signature = (inputs, labels, num_classes=None))]
    fn accuracy(&self, inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: Option<usize>) -> PyResult<f64> {
        let batch = self.batch(inputs, Some(labels), self.mode, num_classes)?;
        accuracy_relaxed(&batch, &self.params, &self.relaxed, &self.spec, self.mode).map_err(py_err)
    }
}

impl Network {
    fn batch(&self, inputs: Vec<Vec<f64>>, labels: Option<Vec<usize>>, mode: ClampMode, num_classes: Option<usize>) -> PyResult<LabeledBatch> {
        let inputs: Vec<Vector> = inputs.into_iter().map(vector).collect();
        match (labels, mode.label_dim(&self.spec)) {
            (None, None) => Ok(LabeledBatch::unlabeled(inputs)),
            (Some(l), Some(dim)) => LabeledBatch::from_indices(inputs, &l, num_classes.unwrap_or(dim), 0.0).map_err(py_err),
            (None, Some(_)) => Err(PyValueError::new_err("supervised modes need labels")),
            (Some(_), None) => Err(PyValueError::new_err("labels given in unsupervised mode")),
        }
    }
}

/// One Kalman predict-correct step; returns `(mean, cov)`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn kf_step(mean: Vec<f64>, cov: Rows, u: Vec<f64>, o: Vec<f64>, a: Rows, b: Rows, c: Rows, process_cov: Rows, obs_cov: Rows) -> PyResult<(Vec<f64>, Rows)> {
    let model = LinearStateSpace::new(matrix(a)?, matrix(b)?, matrix(c)?, matrix(process_cov)?, matrix(obs_cov)?).map_err(py_err)?;
    let belief = BeliefState::new(vector(mean), matrix(cov)?).map_err(py_err)?;
    let next = kalman_step(&belief, &vector(u), &vector(o), &model).map_err(py_err)?;
    Ok((next.mean.as_slice().to_vec(), rows(&next.cov)))
}

/// Converged linear predictive coding estimate of the next state from the previous mean.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn pc_state_estimate(prev_mean: Vec<f64>, u: Vec<f64>, o: Vec<f64>, a: Rows, b: Rows, c: Rows, process_cov: Rows, obs_cov: Rows) -> PyResult<Vec<f64>> {
    let model = LinearStateSpace::new(matrix(a)?, matrix(b)?, matrix(c)?, matrix(process_cov)?, matrix(obs_cov)?).map_err(py_err)?;
    let report = pc_linear_solve(&vector(prev_mean), &vector(u), &vector(o), &model, &PcSolveConfig::default()).map_err(py_err)?;
    Ok(report.mean.as_slice().to_vec())
}

/// One step of the covariance learning rule.
#[pyfunction]
fn precision_step(cov: Rows, eps: Vec<f64>, lr: f64) -> PyResult<Rows> {
    cov_step(&matrix(cov)?, &vector(eps), lr).map(|m| rows(&m)).map_err(py_err)
}

/// Largest per-step gap between the predictive coding controller and derivative-form PID.
#[pyfunction]
#[pyo3(signature = (precisions, dt=0.01, steps=10_000, target=1.0, disturbance=Vec::new()))]
fn pid_gap(precisions: [f64; 3], dt: f64, steps: usize, target: f64, disturbance: Vec<f64>) -> PyResult<f64> {
    let ctl = PcPidController::new(precisions, dt).map_err(py_err)?;
    let pc = simulate_pc_pid(&ctl, target, 0.0, steps, &disturbance).map_err(py_err)?;
    let pid = simulate_pid_velocity(ctl.gains(), dt, target, 0.0, steps, &disturbance).map_err(py_err)?;
    Ok(pc.iter().zip(&pid).map(|(x, y)| (x.a - y.a).abs()).fold(0.0, f64::max))
}

/// Relaxes the error units of a random comparison graph; returns `(error gap, weight gap, iterations)`.
///
/// `index % 3` picks an MLP, a chain or a diamond.
#[pyfunction]
#[pyo3(signature = (index, dims, activation="tanh", seed=0))]
fn backprop_gap(index: usize, dims: Vec<usize>, activation: &str, seed: u64) -> PyResult<(f64, f64, usize)> {
    let act = self::activation(activation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = comparison_graph(index, &dims, act, &mut rng).map_err(py_err)?;
    let inputs: Vec<Vector> = g
        .inputs()
        .iter()
        .map(|&k| Vector::from_fn(g.vertex(k).dim, |_, _| rand_distr_normal(&mut rng)))
        .collect();
    let cfg = RelaxConfig { step: 0.5, max_iters: 200 * g.depth(), tol: 1e-13, schedule: Schedule::Jacobi };
    graph_gap(&g, &inputs, &cfg).map_err(py_err)
}

fn rand_distr_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    rng.sample(rand_distr::StandardNormal)
}

/// Reads an IDX file; returns `(shape, bytes)`.
#[pyfunction]
fn read_idx(path: &str) -> PyResult<(Vec<usize>, Vec<u8>)> {
    let t = load_idx(std::path::Path::new(path)).map_err(py_err)?;
    Ok((t.shape, t.data))
}

/// Runs an experiment from TOML text; returns the metrics records as dicts.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ExperimentConfig::from_toml(config).map_err(py_err)?;
    let summary = run(&cfg).map_err(py_err)?;
    summary
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("free_energy", r.free_energy)?;
            d.set_item("layer_error_norms", r.layer_error_norms.clone())?;
            d.set_item("metric", r.metric.clone())?;
            d.set_item("task_metric", r.task_metric)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "predcode")]
fn predcode_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(kf_step, m)?)?;
    m.add_function(wrap_pyfunction!(pc_state_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(precision_step, m)?)?;
    m.add_function(wrap_pyfunction!(pid_gap, m)?)?;
    m.add_function(wrap_pyfunction!(backprop_gap, m)?)?;
    m.add_function(wrap_pyfunction!(read_idx, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
