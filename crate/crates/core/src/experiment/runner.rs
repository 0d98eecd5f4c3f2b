use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{DatasetSection, ExperimentConfig, ExperimentKind};
use super::metrics::{MetricsRecord, MetricsWriter};
use crate::data::{load_idx, synth_clusters, synth_gaussian};
use crate::dynamics::{simulate_pc_pid, simulate_pid_velocity, write_control_log, PcPidController};
use crate::error::{PcError, Result};
use crate::graph::{forward_pass, reverse_oracle, AugmentedGraph, ComputationGraph, Loss, Op, RelaxConfig};
use crate::kalman::{kf_correct, kf_project, pc_map_solve, BeliefState, LinearStateSpace, PcSolveConfig};
use crate::linalg::{Matrix, Vector};
use crate::model::{run_inference, LearningConfig, NetworkParams, NetworkSpec, NetworkState, PrecisionLearning};
use crate::precision::{empirical_fixed_point_check, precision_step};
use crate::relaxed::RelaxedNetwork;
use crate::training::{
    accuracy_relaxed, generate_detailed, train_epoch_relaxed, ClampMode, LabeledBatch, TrainConfig,
};

/// Parameters persisted by `train` and read back by `classify` and `generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub spec: NetworkSpec,
    pub mode: ClampMode,
    pub params: NetworkParams,
    pub relaxed: RelaxedNetwork,
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PcError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub kind: ExperimentKind,
    pub records: Vec<MetricsRecord>,
}

impl RunSummary {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Process exit status for an error: 3 for numerical divergence, 2 for
/// invalid input or configuration, 1 otherwise.
pub fn exit_code(err: &PcError) -> i32 {
    match err {
        PcError::Divergence { .. } | PcError::Numerical(_) => 3,
        PcError::Io(_) | PcError::State(_) => 1,
        _ => 2,
    }
}

/// Runs the suite named by `cfg.kind`, writing metrics to `cfg.output` if set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let mut out = match &cfg.output {
        Some(p) => MetricsWriter::lazy(p, cfg.timing),
        None => MetricsWriter::sink(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.kind {
        ExperimentKind::Train => run_train(cfg, &mut out, &mut rng)?,
        ExperimentKind::Classify => run_classify(cfg, &mut out)?,
        ExperimentKind::Generate => run_generate(cfg, &mut out, &mut rng)?,
        ExperimentKind::KalmanCompare => run_kalman(cfg, &mut out, &mut rng)?,
        ExperimentKind::BackpropCompare => run_backprop(cfg, &mut out, &mut rng)?,
        ExperimentKind::PidCompare => run_pid(cfg, &mut out)?,
        ExperimentKind::PrecisionStudy => run_precision(cfg, &mut out, &mut rng)?,
    }
    Ok(RunSummary { kind: cfg.kind, records: out.finish()? })
}

fn build_spec(cfg: &ExperimentConfig) -> Result<NetworkSpec> {
    let n = &cfg.network;
    NetworkSpec::new(n.layer_dims.clone(), cfg.activations()[0])?
        .with_activations(cfg.activations())?
        .with_step_size(n.step_size)?
        .with_max_iters(n.max_iters)?
        .with_tol(n.tol)
}

struct Datasets {
    train: LabeledBatch,
    test: LabeledBatch,
}

fn load_dataset(cfg: &ExperimentConfig, spec: &NetworkSpec, mode: ClampMode) -> Result<Datasets> {
    let data_dim = spec.dim(mode.data_layer(spec));
    let classes = mode.label_dim(spec);
    let smoothing = cfg.training.label_smoothing;
    let make = |inputs: Vec<Vector>, labels: Vec<usize>| -> Result<LabeledBatch> {
        if let Some(bad) = inputs.iter().find(|x| x.len() != data_dim) {
            return Err(PcError::Config(format!("dataset items have {} values, data layer has {data_dim}", bad.len())));
        }
        match classes {
            Some(k) => LabeledBatch::from_indices(inputs, &labels, k, smoothing),
            None => Ok(LabeledBatch::unlabeled(inputs)),
        }
    };
    match &cfg.dataset {
        DatasetSection::Idx { dir, train_limit, test_limit } => {
            let read = |images: &str, labels: &str, limit: &Option<usize>| -> Result<LabeledBatch> {
                let mut x = load_idx(&dir.join(images))?.scaled_items();
                let mut y = load_idx(&dir.join(labels))?.labels()?;
                if let Some(n) = limit {
                    x.truncate(*n);
                    y.truncate(*n);
                }
                make(x, y)
            };
            Ok(Datasets {
                train: read("train-images-idx3-ubyte", "train-labels-idx1-ubyte", train_limit)?,
                test: read("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", test_limit)?,
            })
        }
        DatasetSection::Clusters { n_train, n_test, separation, noise } => {
            let k = classes.unwrap_or(4);
            let all = synth_clusters(cfg.seed, n_train + n_test, k, data_dim, *separation, *noise)?;
            let (xtr, xte) = all.inputs.split_at(*n_train);
            let (ytr, yte) = all.classes.split_at(*n_train);
            Ok(Datasets { train: make(xtr.to_vec(), ytr.to_vec())?, test: make(xte.to_vec(), yte.to_vec())? })
        }
    }
}

fn mean_reconstruction_error(batch: &LabeledBatch, params: &NetworkParams, spec: &NetworkSpec) -> Result<f64> {
    let mut total = 0.0;
    for x in &batch.inputs {
        let mut s = NetworkState::zeros(spec);
        s.clamp(0, x.clone())?;
        run_inference(&mut s, params, spec)?;
        total += s.eps[0].norm();
    }
    Ok(total / batch.len() as f64)
}

fn evaluate(data: &LabeledBatch, model: &SavedModel) -> Result<(&'static str, f64)> {
    if model.mode.is_supervised() {
        Ok(("accuracy", accuracy_relaxed(data, &model.params, &model.relaxed, &model.spec, model.mode)?))
    } else {
        Ok(("reconstruction_error", mean_reconstruction_error(data, &model.params, &model.spec)?))
    }
}

fn run_train(cfg: &ExperimentConfig, out: &mut MetricsWriter, rng: &mut ChaCha8Rng) -> Result<()> {
    let spec = build_spec(cfg)?;
    let mode = cfg.training.mode;
    let data = load_dataset(cfg, &spec, mode)?;
    let params = NetworkParams::random(&spec, rng);
    let relaxed = RelaxedNetwork::new(&spec, cfg.relaxation, rng);
    let mut model = SavedModel { spec, mode, params, relaxed };
    let tc = TrainConfig {
        mode,
        batch_size: cfg.training.batch_size,
        learning: LearningConfig {
            weight_lr: cfg.training.weight_lr,
            weight_decay: cfg.training.weight_decay,
            precision: PrecisionLearning { mode: cfg.precision.mode, lr: cfg.precision.lr },
            ..LearningConfig::default()
        },
    };
    for epoch in 0..cfg.training.epochs {
        let r = train_epoch_relaxed(&data.train, &mut model.params, &mut model.relaxed, &model.spec, &tc, rng)?;
        let (name, value) = evaluate(&data.test, &model)?;
        out.write(epoch as u64, Some(r.mean_free_energy), r.layer_error_norms, name, value)?;
    }
    if let Some(p) = &cfg.params {
        model.save(p)?;
    }
    Ok(())
}

fn saved_model(cfg: &ExperimentConfig) -> Result<SavedModel> {
    let path = cfg.params.as_ref().ok_or_else(|| PcError::Config("this experiment needs `params`".into()))?;
    SavedModel::load(path)
}

fn run_classify(cfg: &ExperimentConfig, out: &mut MetricsWriter) -> Result<()> {
    let model = saved_model(cfg)?;
    if !model.mode.is_supervised() {
        return Err(PcError::Unsupported("classification needs a supervised model".into()));
    }
    let data = load_dataset(cfg, &model.spec, model.mode)?;
    let (name, value) = evaluate(&data.test, &model)?;
    out.write(0, None, Vec::new(), name, value)
}

fn run_generate(cfg: &ExperimentConfig, out: &mut MetricsWriter, rng: &mut ChaCha8Rng) -> Result<()> {
    let model = saved_model(cfg)?;
    let source = match model.mode {
        ClampMode::Unsupervised => model.spec.depth(),
        m => m.label_layer(&model.spec).expect("supervised"),
    };
    let dim = model.spec.dim(source);
    let data = load_dataset(cfg, &model.spec, model.mode).ok();
    for k in 0..dim {
        let cue = match model.mode {
            ClampMode::Unsupervised => Vector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng))),
            _ => crate::training::one_hot(k, dim, 0.0)?,
        };
        let g = generate_detailed(&cue, &model.params, &model.spec, model.mode)?;
        let class_mean = data.as_ref().and_then(|d| {
            let labels = d.test.labels.as_ref()?;
            let members: Vec<&Vector> =
                d.test.inputs.iter().zip(labels).filter(|(_, y)| y.imax() == k).map(|(x, _)| x).collect();
            (!members.is_empty()).then(|| members.iter().fold(Vector::zeros(g.observation.len()), |a, x| a + *x) / members.len() as f64)
        });
        match class_mean {
            Some(m) => out.write(k as u64, None, Vec::new(), "class_mean_distance", (&g.observation - m).norm())?,
            None => out.write(k as u64, None, Vec::new(), "observation_norm", g.observation.norm())?,
        }
    }
    Ok(())
}

fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `R Rᵀ / n + floor · I`.
pub fn random_spd<R: Rng + ?Sized>(n: usize, floor: f64, rng: &mut R) -> Matrix {
    let r = random_matrix(n, n, rng);
    (&r * r.transpose()) / n as f64 + Matrix::identity(n, n) * floor
}

/// A random system whose dynamics matrix has operator norm 0.9.
pub fn random_state_space<R: Rng + ?Sized>(n: usize, m: usize, p: usize, rng: &mut R) -> Result<LinearStateSpace> {
    let a = random_matrix(n, n, rng);
    let a = &a * (0.9 / a.clone().singular_values().max());
    let b = random_matrix(n, m, rng);
    let c = random_matrix(p, n, rng);
    let q = random_spd(n, 0.2, rng);
    let r = random_spd(p, 0.2, rng);
    LinearStateSpace::new(a, b, c, q, r)
}

fn run_kalman(cfg: &ExperimentConfig, out: &mut MetricsWriter, rng: &mut ChaCha8Rng) -> Result<()> {
    let k = &cfg.kalman;
    let solve = PcSolveConfig::default();
    let mut overall = 0.0f64;
    for _ in 0..k.systems {
        let model = random_state_space(k.state_dim, k.control_dim, k.obs_dim, rng)?;
        let controls: Vec<Vector> = (0..k.steps).map(|_| random_matrix(k.control_dim, 1, rng).column(0).into()).collect();
        let x0 = Vector::zeros(k.state_dim);
        let (_, traj) = model.simulate(&x0, &controls, rng)?;
        let mut kf = BeliefState::new(x0.clone(), Matrix::identity(k.state_dim, k.state_dim))?;
        let mut pc_mean = x0;
        for (u, o) in traj.controls.iter().zip(&traj.observations) {
            let predicted = kf_project(&kf, u, &model)?;
            let pc_prior = model.transition(&pc_mean, u);
            let pc = pc_map_solve(&pc_prior, &predicted.cov, o, &model.c, &model.obs_cov, &solve)?;
            if !pc.converged {
                return Err(PcError::Numerical("linear predictive coding solve did not converge".into()));
            }
            kf = kf_correct(&predicted, o, &model)?;
            pc_mean = pc.mean;
            let gap = (&pc_mean - &kf.mean).amax();
            overall = overall.max(gap);
            let step = out.next_step();
            out.write(step, None, vec![(o - &model.c * &kf.mean).norm()], "max_abs_gap", gap)?;
        }
    }
    let step = out.next_step();
    out.write(step, None, Vec::new(), "max_abs_gap_overall", overall)
}

/// The three graph families compared against the reverse-mode oracle: MLPs, chains and diamonds.
pub fn comparison_graph<R: Rng + ?Sized>(index: usize, dims: &[usize], activation: crate::activation::Activation, rng: &mut R) -> Result<ComputationGraph> {
    let out_dim = *dims.last().expect("validated");
    let target = Vector::from_iterator(out_dim, (0..out_dim).map(|_| StandardNormal.sample(rng)));
    let loss = Loss::SquaredError { target: target.clone() };
    let mut g = match index % 3 {
        0 => ComputationGraph::mlp(dims, activation, loss, rng)?,
        1 => ComputationGraph::chain(out_dim, dims.len(), activation, loss, rng)?,
        _ => ComputationGraph::diamond(dims[0], out_dim, activation, loss, rng)?,
    };
    g.set_loss(Loss::SquaredError { target })?;
    Ok(g)
}

/// Max-abs gaps `(errors, parameter gradients)` between relaxed PC and the oracle, plus iterations used.
pub fn backprop_gap(graph: &ComputationGraph, inputs: &[Vector], cfg: &RelaxConfig) -> Result<(f64, f64, usize)> {
    let fwd = forward_pass(graph, inputs)?;
    let oracle = reverse_oracle(graph, &fwd);
    let mut aug = AugmentedGraph::new(graph, fwd)?;
    let report = aug.relax(cfg)?;
    let free: Vec<usize> = (0..graph.len()).filter(|&i| graph.vertex(i).op != Op::Input).collect();
    let eps_gap = free.iter().map(|&i| (&aug.errors()[i] - &oracle.vertex[i]).amax()).fold(0.0, f64::max);
    let grads = aug.pc_weight_update()?;
    let param_gap = grads.iter().zip(&oracle.params).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    Ok((eps_gap, param_gap, report.iterations))
}

fn run_backprop(cfg: &ExperimentConfig, out: &mut MetricsWriter, rng: &mut ChaCha8Rng) -> Result<()> {
    let b = &cfg.backprop;
    let mut overall = 0.0f64;
    for gi in 0..b.graphs {
        let graph = comparison_graph(gi, &b.dims, b.activation, rng)?;
        let inputs: Vec<Vector> = graph
            .inputs()
            .iter()
            .map(|&i| Vector::from_iterator(graph.vertex(i).dim, (0..graph.vertex(i).dim).map(|_| StandardNormal.sample(rng))))
            .collect();
        let relax = RelaxConfig { step: b.relax_step, max_iters: 200 * graph.depth(), tol: 1e-13, schedule: b.schedule };
        let (eps_gap, param_gap, iterations) = backprop_gap(&graph, &inputs, &relax)?;
        let gap = eps_gap.max(param_gap);
        overall = overall.max(gap);
        out.write(gi as u64, None, vec![eps_gap, param_gap, iterations as f64], "max_abs_gap", gap)?;
    }
    out.write(b.graphs as u64, None, Vec::new(), "max_abs_gap_overall", overall)
}

/// Piecewise-constant disturbance from `(start, magnitude)` steps.
pub fn step_disturbance(steps: usize, changes: &[(usize, f64)]) -> Vec<f64> {
    let mut d = vec![0.0; steps];
    let mut sorted = changes.to_vec();
    sorted.sort_by_key(|c| c.0);
    for (start, mag) in sorted {
        d.iter_mut().skip(start).for_each(|v| *v = mag);
    }
    d
}

fn run_pid(cfg: &ExperimentConfig, out: &mut MetricsWriter) -> Result<()> {
    let p = &cfg.pid;
    let controller = PcPidController::new(p.precisions, p.dt)?;
    let disturbance = step_disturbance(p.steps, &p.disturbances);
    let pc = simulate_pc_pid(&controller, p.target, 0.0, p.steps, &disturbance)?;
    let pid = simulate_pid_velocity(controller.gains(), p.dt, p.target, 0.0, p.steps, &disturbance)?;
    let mut overall = 0.0f64;
    for (t, (a, b)) in pc.iter().zip(&pid).enumerate() {
        let gap = (a.a - b.a).abs();
        overall = overall.max(gap);
        out.write(t as u64, Some(a.free_energy), vec![(a.o - p.target).abs()], "control_gap", gap)?;
    }
    if let Some(path) = &cfg.output {
        write_control_log(&pc, std::fs::File::create(trajectory_path(path))?)?;
    }
    out.write(p.steps as u64, None, Vec::new(), "control_gap_overall", overall)
}

/// `metrics.jsonl` → `metrics.trajectory.csv`.
pub fn trajectory_path(metrics: &Path) -> PathBuf {
    metrics.with_extension("trajectory.csv")
}

/// Robbins–Monro run of the scalar covariance ODE over a sample stream.
pub fn stream_fixed_point(samples: &[Vector], sigma0: f64) -> Result<f64> {
    let mut cov = Matrix::from_element(1, 1, sigma0);
    for (t, e) in samples.iter().enumerate() {
        let lr = 1.0 / (3.0 * (t + 1) as f64);
        cov = precision_step(&cov, e, lr.min(0.3))?;
    }
    Ok(cov[(0, 0)])
}

fn run_precision(cfg: &ExperimentConfig, out: &mut MetricsWriter, rng: &mut ChaCha8Rng) -> Result<()> {
    let s = &cfg.precision_study;
    for (i, &e) in s.errors.iter().enumerate() {
        let eps = Vector::from_element(1, e);
        let mut cov = Matrix::from_element(1, 1, 1.0);
        for _ in 0..s.steps {
            cov = precision_step(&cov, &eps, s.lr)?;
        }
        let expected = (e * e).cbrt();
        out.write(i as u64, None, vec![cov[(0, 0)]], "abs_error_vs_cube_root", (cov[(0, 0)] - expected).abs())?;
    }
    let samples = synth_gaussian(rng.random(), s.samples, &Vector::zeros(1), &Matrix::identity(1, 1))?;
    let sigma = stream_fixed_point(&samples, 1.0)?;
    let residual = empirical_fixed_point_check(&samples, &Matrix::from_element(1, 1, sigma))?;
    out.write(s.errors.len() as u64, None, vec![sigma, 3.0 / (s.samples as f64).sqrt()], "self_consistency_residual", residual)
}
